use super::DiffusionError;

/// Latent grid of shape (F, H, W, C), stored row-major with C fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub clip_id: String,
    pub shape: (usize, usize, usize, usize),
    pub grid: Vec<f64>,
}

impl LatentVideo {
    pub fn new(clip_id: &str, shape: (usize, usize, usize, usize), grid: Vec<f64>) -> Result<Self, DiffusionError> {
        let (f, h, w, c) = shape;
        if f == 0 || h == 0 || w == 0 || c == 0 {
            return Err(DiffusionError::ShapeMismatch(format!("zero dimension in {shape:?}")));
        }
        if grid.len() != f * h * w * c {
            return Err(DiffusionError::ShapeMismatch(format!(
                "grid length {} does not match shape {shape:?}",
                grid.len()
            )));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::ShapeMismatch("non-finite latent entry".into()));
        }
        Ok(LatentVideo {
            clip_id: clip_id.to_string(),
            shape,
            grid,
        })
    }

    #[inline]
    fn offset(&self, f: usize, h: usize, w: usize, c: usize) -> usize {
        let (_, hh, ww, cc) = self.shape;
        ((f * hh + h) * ww + w) * cc + c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Vision,
    Text,
    Concatenated,
}

/// Flat sequence of D-dimensional tokens. For concatenated sequences the
/// boundary records where the text block ends and the vision block begins.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Vec<f64>>,
    pub dim: usize,
    pub kind: TokenKind,
    pub boundary: Option<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Vec<f64>>, dim: usize, kind: TokenKind) -> Result<Self, DiffusionError> {
        for t in &tokens {
            if t.len() != dim {
                return Err(DiffusionError::DimMismatch(t.len(), dim));
            }
        }
        Ok(TokenSequence {
            tokens,
            dim,
            kind,
            boundary: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Group q temporal and p x p spatial cells into one token. Token order is
/// temporal-major then row-major spatial; within a token the layout is
/// (dt, dy, dx, channel). D = q * p^2 * C and the sequence length is
/// (F/q) * (H/p) * (W/p).
pub fn patchify(video: &LatentVideo, q: usize, p: usize) -> Result<TokenSequence, DiffusionError> {
    let (f, h, w, c) = video.shape;
    if q == 0 || f % q != 0 {
        return Err(DiffusionError::NotDivisible { axis: "F", size: f, rate: q });
    }
    if p == 0 || h % p != 0 {
        return Err(DiffusionError::NotDivisible { axis: "H", size: h, rate: p });
    }
    if w % p != 0 {
        return Err(DiffusionError::NotDivisible { axis: "W", size: w, rate: p });
    }
    let dim = q * p * p * c;
    let mut tokens = Vec::with_capacity((f / q) * (h / p) * (w / p));
    for tf in 0..f / q {
        for th in 0..h / p {
            for tw in 0..w / p {
                let mut token = Vec::with_capacity(dim);
                for dt in 0..q {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                token.push(
                                    video.grid[video.offset(tf * q + dt, th * p + dy, tw * p + dx, ch)],
                                );
                            }
                        }
                    }
                }
                tokens.push(token);
            }
        }
    }
    TokenSequence::new(tokens, dim, TokenKind::Vision)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(
    seq: &TokenSequence,
    shape: (usize, usize, usize, usize),
    q: usize,
    p: usize,
) -> Result<LatentVideo, DiffusionError> {
    let (f, h, w, c) = shape;
    if q == 0 || f % q != 0 {
        return Err(DiffusionError::NotDivisible { axis: "F", size: f, rate: q });
    }
    if p == 0 || h % p != 0 {
        return Err(DiffusionError::NotDivisible { axis: "H", size: h, rate: p });
    }
    if w % p != 0 {
        return Err(DiffusionError::NotDivisible { axis: "W", size: w, rate: p });
    }
    let expected_len = (f / q) * (h / p) * (w / p);
    let expected_dim = q * p * p * c;
    if seq.len() != expected_len || seq.dim != expected_dim {
        return Err(DiffusionError::ShapeMismatch(format!(
            "sequence {}x{} inconsistent with shape {shape:?} at rates q={q}, p={p}",
            seq.len(),
            seq.dim
        )));
    }
    let mut grid = vec![0.0; f * h * w * c];
    let mut token_iter = seq.tokens.iter();
    for tf in 0..f / q {
        for th in 0..h / p {
            for tw in 0..w / p {
                let token = token_iter.next().unwrap();
                let mut k = 0;
                for dt in 0..q {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                let off = (((tf * q + dt) * h + th * p + dy) * w + tw * p + dx) * c + ch;
                                grid[off] = token[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    LatentVideo::new("", shape, grid)
}

/// Forward noising: sqrt(abar_t) * z + sqrt(1 - abar_t) * eps, elementwise.
pub fn add_noise(
    z: &TokenSequence,
    eps: &TokenSequence,
    abar_t: f64,
) -> Result<TokenSequence, DiffusionError> {
    if !(abar_t > 0.0 && abar_t <= 1.0) {
        return Err(DiffusionError::BadAlphaBar(abar_t));
    }
    if z.len() != eps.len() || z.dim != eps.dim {
        return Err(DiffusionError::ShapeMismatch(format!(
            "z is {}x{}, eps is {}x{}",
            z.len(),
            z.dim,
            eps.len(),
            eps.dim
        )));
    }
    let signal = abar_t.sqrt();
    let noise = (1.0 - abar_t).sqrt();
    let tokens: Vec<Vec<f64>> = z
        .tokens
        .iter()
        .zip(&eps.tokens)
        .map(|(zt, et)| zt.iter().zip(et).map(|(a, b)| signal * a + noise * b).collect())
        .collect();
    TokenSequence::new(tokens, z.dim, z.kind)
}

/// Mean over all elements of the squared prediction error.
pub fn diffusion_loss(pred: &TokenSequence, eps: &TokenSequence) -> Result<f64, DiffusionError> {
    if pred.len() != eps.len() || pred.dim != eps.dim {
        return Err(DiffusionError::ShapeMismatch(format!(
            "pred is {}x{}, eps is {}x{}",
            pred.len(),
            pred.dim,
            eps.len(),
            eps.dim
        )));
    }
    let n = (pred.len() * pred.dim) as f64;
    let sum: f64 = pred
        .tokens
        .iter()
        .zip(&eps.tokens)
        .flat_map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    Ok(sum / n)
}

/// Text tokens first, then vision tokens; the boundary index lets the loss
/// apply to the vision block only.
pub fn concat_text(vision: &TokenSequence, text: &TokenSequence) -> Result<TokenSequence, DiffusionError> {
    if !text.is_empty() && text.dim != vision.dim {
        return Err(DiffusionError::DimMismatch(text.dim, vision.dim));
    }
    let mut tokens = text.tokens.clone();
    tokens.extend(vision.tokens.iter().cloned());
    let mut seq = TokenSequence::new(tokens, vision.dim, TokenKind::Concatenated)?;
    seq.boundary = Some(text.len());
    Ok(seq)
}

/// Split a concatenated sequence back into its (text, vision) halves.
pub fn split_at_boundary(seq: &TokenSequence) -> Result<(TokenSequence, TokenSequence), DiffusionError> {
    let boundary = seq
        .boundary
        .ok_or_else(|| DiffusionError::ShapeMismatch("sequence has no boundary".into()))?;
    let text = TokenSequence::new(seq.tokens[..boundary].to_vec(), seq.dim, TokenKind::Text)?;
    let vision = TokenSequence::new(seq.tokens[boundary..].to_vec(), seq.dim, TokenKind::Vision)?;
    Ok((text, vision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(shape: (usize, usize, usize, usize), seed: u64) -> LatentVideo {
        let (f, h, w, c) = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<f64> = (0..f * h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        LatentVideo::new("v", shape, grid).unwrap()
    }

    fn seq_of(tokens: Vec<Vec<f64>>) -> TokenSequence {
        let dim = tokens[0].len();
        TokenSequence::new(tokens, dim, TokenKind::Vision).unwrap()
    }

    #[test]
    fn patchify_length_and_dim() {
        let v = random_video((8, 16, 16, 4), 1);
        let seq = patchify(&v, 2, 4).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.dim, 128);
    }

    #[test]
    fn identity_rates_flatten() {
        let v = random_video((3, 2, 2, 5), 2);
        let seq = patchify(&v, 1, 1).unwrap();
        assert_eq!(seq.len(), 3 * 2 * 2);
        assert_eq!(seq.dim, 5);
    }

    #[test]
    fn patchify_round_trip_exact() {
        let v = random_video((8, 16, 16, 4), 3);
        let seq = patchify(&v, 2, 4).unwrap();
        let back = unpatchify(&seq, v.shape, 2, 4).unwrap();
        assert_eq!(back.grid, v.grid);
    }

    #[test]
    fn zero_tokens_give_zero_grid() {
        let seq = TokenSequence::new(vec![vec![0.0; 8]; 2], 8, TokenKind::Vision).unwrap();
        let v = unpatchify(&seq, (2, 2, 2, 2), 1, 2).unwrap();
        assert!(v.grid.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shuffled_tokens_break_round_trip() {
        let v = random_video((4, 4, 4, 2), 4);
        let mut seq = patchify(&v, 2, 2).unwrap();
        seq.tokens.swap(0, 5);
        let back = unpatchify(&seq, v.shape, 2, 2).unwrap();
        assert_ne!(back.grid, v.grid);
    }

    #[test]
    fn divisibility_violation_names_axis() {
        let v = random_video((3, 4, 4, 2), 5);
        match patchify(&v, 2, 2) {
            Err(DiffusionError::NotDivisible { axis: "F", size: 3, rate: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn add_noise_identity_limit() {
        let z = seq_of(vec![vec![1.5, -0.5], vec![0.25, 3.0]]);
        let eps = seq_of(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let out = add_noise(&z, &eps, 1.0).unwrap();
        assert_eq!(out.tokens, z.tokens);
    }

    #[test]
    fn add_noise_noise_limit() {
        let z = seq_of(vec![vec![3.0; 4]]);
        let eps = seq_of(vec![vec![0.7; 4]]);
        let out = add_noise(&z, &eps, 1e-12).unwrap();
        for v in &out.tokens[0] {
            assert!((v - 0.7).abs() < 1e-5);
        }
    }

    #[test]
    fn add_noise_formula_value() {
        let z = seq_of(vec![vec![2.0]]);
        let eps = seq_of(vec![vec![1.0]]);
        let out = add_noise(&z, &eps, 0.25).unwrap();
        assert!((out.tokens[0][0] - (0.5 * 2.0 + 0.75f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_and_unit_offset() {
        let eps = seq_of(vec![vec![0.3, -1.2], vec![0.0, 2.0]]);
        assert_eq!(diffusion_loss(&eps, &eps).unwrap(), 0.0);
        let shifted = seq_of(eps.tokens.iter().map(|t| t.iter().map(|v| v + 1.0).collect()).collect());
        assert!((diffusion_loss(&shifted, &eps).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_of_zero_prediction_on_standard_normal() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000usize;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps_seq = seq_of(vec![eps]);
        let zero = seq_of(vec![vec![0.0; n]]);
        let loss = diffusion_loss(&zero, &eps_seq).unwrap();
        assert!((loss - 1.0).abs() < 0.01, "loss {loss}");
    }

    #[test]
    fn concat_boundary_and_round_trip() {
        let vision = seq_of(vec![vec![1.0, 2.0]; 5]);
        let text = TokenSequence::new(vec![vec![9.0, 9.0]; 3], 2, TokenKind::Text).unwrap();
        let seq = concat_text(&vision, &text).unwrap();
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.boundary, Some(3));
        let (t2, v2) = split_at_boundary(&seq).unwrap();
        assert_eq!(t2.tokens, text.tokens);
        assert_eq!(v2.tokens, vision.tokens);
    }

    #[test]
    fn empty_text_passthrough() {
        let vision = seq_of(vec![vec![1.0]; 4]);
        let text = TokenSequence::new(vec![], 1, TokenKind::Text).unwrap();
        let seq = concat_text(&vision, &text).unwrap();
        assert_eq!(seq.boundary, Some(0));
        assert_eq!(seq.tokens, vision.tokens);
    }

    proptest! {
        #[test]
        fn patchify_round_trip_random_shapes(
            fq in 1usize..4, hp in 1usize..4, wp in 1usize..4,
            q in 1usize..4, p in 1usize..4, c in 1usize..4, seed in 0u64..100) {
            let shape = (fq * q, hp * p, wp * p, c);
            let v = random_video(shape, seed);
            let seq = patchify(&v, q, p).unwrap();
            prop_assert_eq!(seq.len(), fq * hp * wp);
            prop_assert_eq!(seq.dim, q * p * p * c);
            let back = unpatchify(&seq, shape, q, p).unwrap();
            prop_assert_eq!(back.grid, v.grid);
        }
    }
}
