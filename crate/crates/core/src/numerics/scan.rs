//! Diagonal linear recurrence `h_t = decay_t ⊙ h_{t-1} + input_t`.
//!
//! Two schedules are provided. [`scan_sequential`] walks the sequence left to
//! right. [`scan_parallel`] is a reduce-then-scan over fixed-size blocks: each
//! block is folded with the associative [`ScanElement::combine`], the block
//! aggregates are chained from `h0`, and every block is then re-scanned from its
//! carry-in. The block layout is a function of the sequence length only, so the
//! output bits do not depend on how many worker threads execute it.

use rayon::prelude::*;

use super::{NumericsError, Scalar};

/// Work (elements × channels) below which the blocked scan runs on the calling thread.
const PAR_WORK: usize = 1 << 14;

/// One step of the recurrence: per-channel multiplier and additive term.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub decay: Vec<T>,
    pub input: Vec<T>,
}

impl<T: Scalar> ScanElement<T> {
    pub fn new(decay: Vec<T>, input: Vec<T>) -> Result<Self, NumericsError> {
        if decay.len() != input.len() {
            return Err(NumericsError::Shape(format!(
                "scan element decay has {} channels, input has {}",
                decay.len(),
                input.len()
            )));
        }
        Ok(Self { decay, input })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            decay: vec![T::one(); channels],
            input: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.decay.len()
    }

    /// `(λ1, u1) ∘ (λ2, u2) = (λ1·λ2, λ2·u1 + u2)`: apply `self` first, then `next`.
    pub fn combine(&self, next: &Self) -> Self {
        let decay = self.decay.iter().zip(&next.decay).map(|(&a, &b)| a * b).collect();
        let input = self
            .input
            .iter()
            .zip(next.decay.iter().zip(&next.input))
            .map(|(&u1, (&l2, &u2))| l2 * u1 + u2)
            .collect();
        Self { decay, input }
    }

    /// `decay ⊙ h + input`.
    pub fn apply(&self, h: &[T]) -> Vec<T> {
        self.decay.iter().zip(&self.input).zip(h).map(|((&a, &u), &h)| a * h + u).collect()
    }
}

fn flatten<T: Scalar>(elements: &[ScanElement<T>], h0: &[T]) -> Result<(Vec<T>, Vec<T>), NumericsError> {
    let ch = h0.len();
    let mut decay = Vec::with_capacity(elements.len() * ch);
    let mut input = Vec::with_capacity(elements.len() * ch);
    for (t, e) in elements.iter().enumerate() {
        if e.decay.len() != ch || e.input.len() != ch {
            return Err(NumericsError::Shape(format!(
                "scan element {t} has {}/{} channels, h0 has {ch}",
                e.decay.len(),
                e.input.len()
            )));
        }
        decay.extend_from_slice(&e.decay);
        input.extend_from_slice(&e.input);
    }
    Ok((decay, input))
}

fn unflatten<T: Scalar>(flat: Vec<T>, ch: usize) -> Vec<Vec<T>> {
    if ch == 0 {
        return Vec::new();
    }
    flat.chunks(ch).map(<[T]>::to_vec).collect()
}

/// Left-to-right evaluation; returns `h_1..h_L`.
pub fn scan_sequential<T: Scalar>(elements: &[ScanElement<T>], h0: &[T]) -> Result<Vec<Vec<T>>, NumericsError> {
    let (decay, input) = flatten(elements, h0)?;
    let mut out = vec![T::zero(); decay.len()];
    scan_rows_sequential(&decay, &input, Some(h0), h0.len(), &mut out);
    Ok(unflatten(out, h0.len()))
}

/// Blocked associative evaluation with identical semantics to [`scan_sequential`].
pub fn scan_parallel<T: Scalar>(elements: &[ScanElement<T>], h0: &[T]) -> Result<Vec<Vec<T>>, NumericsError> {
    let (decay, input) = flatten(elements, h0)?;
    let mut out = vec![T::zero(); decay.len()];
    scan_rows_blocked(&decay, &input, Some(h0), h0.len(), &mut out);
    Ok(unflatten(out, h0.len()))
}

/// Block length used by the blocked schedule for a sequence of `len` steps.
pub fn scan_block_len(len: usize) -> usize {
    ((len as f64).sqrt().ceil() as usize).max(1)
}

/// Row-major kernel: `decay`, `input` and `out` are `[len, ch]`.
pub(crate) fn scan_rows_sequential<T: Scalar>(decay: &[T], input: &[T], h0: Option<&[T]>, ch: usize, out: &mut [T]) {
    if ch == 0 || decay.is_empty() {
        return;
    }
    let first = &mut out[..ch];
    match h0 {
        Some(h) => {
            for c in 0..ch {
                first[c] = decay[c] * h[c] + input[c];
            }
        }
        None => {
            for c in 0..ch {
                first[c] = decay[c] * T::zero() + input[c];
            }
        }
    }
    for i in ch..decay.len() {
        out[i] = decay[i] * out[i - ch] + input[i];
    }
}

/// Row-major blocked kernel, see the module docs.
pub(crate) fn scan_rows_blocked<T: Scalar>(decay: &[T], input: &[T], h0: Option<&[T]>, ch: usize, out: &mut [T]) {
    if ch == 0 {
        return;
    }
    let len = decay.len() / ch;
    if len == 0 {
        return;
    }
    let block = scan_block_len(len);
    let n_blocks = len.div_ceil(block);
    let parallel = len * ch >= PAR_WORK;

    // Phase 1: fold every block into a single (Π decay, accumulated input) pair.
    let fold_block = |b: usize| -> (Vec<T>, Vec<T>) {
        let mut a_acc = vec![T::one(); ch];
        let mut u_acc = vec![T::zero(); ch];
        for t in b * block..((b + 1) * block).min(len) {
            let a = &decay[t * ch..(t + 1) * ch];
            let u = &input[t * ch..(t + 1) * ch];
            for c in 0..ch {
                a_acc[c] *= a[c];
                u_acc[c] = a[c] * u_acc[c] + u[c];
            }
        }
        (a_acc, u_acc)
    };
    let aggregates: Vec<(Vec<T>, Vec<T>)> = if parallel {
        (0..n_blocks).into_par_iter().map(fold_block).collect()
    } else {
        (0..n_blocks).map(fold_block).collect()
    };

    // Phase 2: carry-in for every block.
    let mut carries = Vec::with_capacity(n_blocks);
    let mut carry = match h0 {
        Some(h) => h.to_vec(),
        None => vec![T::zero(); ch],
    };
    for (a_acc, u_acc) in &aggregates {
        carries.push(carry.clone());
        for c in 0..ch {
            carry[c] = a_acc[c] * carry[c] + u_acc[c];
        }
    }

    // Phase 3: re-scan each block from its carry-in.
    let rescan = |(b, chunk): (usize, &mut [T])| {
        let start = b * block;
        scan_rows_sequential(
            &decay[start * ch..start * ch + chunk.len()],
            &input[start * ch..start * ch + chunk.len()],
            Some(&carries[b]),
            ch,
            chunk,
        );
    };
    if parallel {
        out.par_chunks_mut(block * ch).enumerate().for_each(rescan);
    } else {
        out.chunks_mut(block * ch).enumerate().for_each(rescan);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn elems(decay: &[&[f64]], input: &[&[f64]]) -> Vec<ScanElement<f64>> {
        decay
            .iter()
            .zip(input)
            .map(|(a, u)| ScanElement::new(a.to_vec(), u.to_vec()).unwrap())
            .collect()
    }

    #[test]
    fn unit_decay_zero_input_stays_zero() {
        let one: &[f64] = &[1.0, 1.0];
        let zero: &[f64] = &[0.0, 0.0];
        let e = elems(&[one; 5], &[zero; 5]);
        for scan in [scan_sequential::<f64>, scan_parallel::<f64>] {
            let h = scan(&e, &[0.0, 0.0]).unwrap();
            assert!(h.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn half_decay_two_steps() {
        let e = elems(&[&[0.5, 0.5], &[0.5, 0.5]], &[&[1.0, 1.0], &[1.0, 1.0]]);
        let h = scan_sequential(&e, &[0.0, 0.0]).unwrap();
        assert_eq!(h, vec![vec![1.0, 1.0], vec![1.5, 1.5]]);
        assert_eq!(scan_parallel(&e, &[0.0, 0.0]).unwrap(), h);
    }

    #[test]
    fn two_elements_follow_combine_rule() {
        let (l1, u1, l2, u2, h0) = (0.3, 0.7, 0.9, -0.2, 1.5);
        let e = elems(&[&[l1], &[l2]], &[&[u1], &[u2]]);
        let h = scan_parallel(&e, &[h0]).unwrap();
        let expected = l2 * (l1 * h0 + u1) + u2;
        assert!((h[1][0] - expected).abs() < 1e-15);
        let combined = e[0].combine(&e[1]);
        assert!((combined.apply(&[h0])[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn single_element_matches_sequential() {
        let e = elems(&[&[0.25, 0.75]], &[&[2.0, -1.0]]);
        assert_eq!(scan_parallel(&e, &[1.0, 1.0]).unwrap(), scan_sequential(&e, &[1.0, 1.0]).unwrap());
    }

    #[test]
    fn mismatched_channels_is_shape_error() {
        let e = elems(&[&[0.5, 0.5]], &[&[1.0, 1.0]]);
        assert!(matches!(scan_sequential(&e, &[0.0]), Err(NumericsError::Shape(_))));
        assert!(ScanElement::new(vec![1.0f64], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn empty_sequence_gives_no_states() {
        let h = scan_parallel::<f64>(&[], &[0.0, 1.0]).unwrap();
        assert!(h.is_empty());
    }
}
