use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tokens::{split_at_boundary, TokenKind, TokenSequence};
use super::DiffusionError;

/// Noise-prediction network contract: maps a concatenated (text, vision)
/// token sequence and a timestep to a prediction with the vision block's
/// shape, deterministically for fixed parameters.
pub trait Denoiser {
    fn predict(&self, seq: &TokenSequence, t: usize) -> Result<TokenSequence, DiffusionError>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}

/// Two-layer perceptron applied per vision token. The input of each token is
/// its own coordinates, the mean text token as conditioning, and a sinusoidal
/// embedding of the timestep; tanh hidden layer, linear output back to D.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    pub dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    theta: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(dim: usize, hidden: usize, time_dim: usize, seed: u64) -> Self {
        assert!(time_dim % 2 == 0, "time_dim must be even");
        let in_dim = 2 * dim + time_dim;
        let n_params = in_dim * hidden + hidden + hidden * dim + dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let theta: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-scale..scale)).collect();
        ToyDenoiser {
            dim,
            hidden,
            time_dim,
            theta,
        }
    }

    fn in_dim(&self) -> usize {
        2 * self.dim + self.time_dim
    }

    // theta layout: W1 [in_dim x hidden], b1 [hidden], W2 [hidden x dim], b2 [dim]
    fn w1(&self) -> &[f64] {
        &self.theta[..self.in_dim() * self.hidden]
    }
    fn b1(&self) -> &[f64] {
        let o = self.in_dim() * self.hidden;
        &self.theta[o..o + self.hidden]
    }
    fn w2(&self) -> &[f64] {
        let o = self.in_dim() * self.hidden + self.hidden;
        &self.theta[o..o + self.hidden * self.dim]
    }
    fn b2(&self) -> &[f64] {
        let o = self.in_dim() * self.hidden + self.hidden + self.hidden * self.dim;
        &self.theta[o..o + self.dim]
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let mut emb = Vec::with_capacity(self.time_dim);
        let half = self.time_dim / 2;
        for k in 0..half {
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / self.time_dim as f64);
            emb.push((t as f64 * freq).sin());
            emb.push((t as f64 * freq).cos());
        }
        emb
    }

    fn context_of(&self, text: &TokenSequence) -> Vec<f64> {
        let mut ctx = vec![0.0; self.dim];
        if !text.is_empty() {
            for token in &text.tokens {
                for (c, v) in ctx.iter_mut().zip(token) {
                    *c += v;
                }
            }
            for c in &mut ctx {
                *c /= text.len() as f64;
            }
        }
        ctx
    }

    fn forward_token(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let in_dim = self.in_dim();
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let mut hidden = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let mut acc = b1[j];
            for (i, &x) in input.iter().enumerate() {
                acc += w1[i * self.hidden + j] * x;
            }
            hidden[j] = acc.tanh();
        }
        let mut out = vec![0.0; self.dim];
        for d in 0..self.dim {
            let mut acc = b2[d];
            for j in 0..self.hidden {
                acc += w2[j * self.dim + d] * hidden[j];
            }
            out[d] = acc;
        }
        let _ = in_dim;
        (hidden, out)
    }

    fn token_inputs(&self, seq: &TokenSequence, t: usize) -> Result<(Vec<Vec<f64>>, usize), DiffusionError> {
        if seq.dim != self.dim {
            return Err(DiffusionError::DimMismatch(seq.dim, self.dim));
        }
        let (text, vision) = if seq.kind == TokenKind::Concatenated {
            split_at_boundary(seq)?
        } else {
            (
                TokenSequence::new(vec![], seq.dim, TokenKind::Text)?,
                seq.clone(),
            )
        };
        let ctx = self.context_of(&text);
        let temb = self.time_embedding(t);
        let inputs: Vec<Vec<f64>> = vision
            .tokens
            .iter()
            .map(|tok| {
                let mut input = Vec::with_capacity(self.in_dim());
                input.extend_from_slice(tok);
                input.extend_from_slice(&ctx);
                input.extend_from_slice(&temb);
                input
            })
            .collect();
        Ok((inputs, vision.len()))
    }

    /// Mean-squared loss of the prediction against `eps` over the vision
    /// block, with the analytic gradient with respect to theta.
    pub fn loss_and_grad(
        &self,
        seq: &TokenSequence,
        t: usize,
        eps: &TokenSequence,
    ) -> Result<(f64, Vec<f64>), DiffusionError> {
        let (inputs, n_tokens) = self.token_inputs(seq, t)?;
        if eps.len() != n_tokens || eps.dim != self.dim {
            return Err(DiffusionError::ShapeMismatch(format!(
                "eps is {}x{}, vision block is {}x{}",
                eps.len(),
                eps.dim,
                n_tokens,
                self.dim
            )));
        }
        let in_dim = self.in_dim();
        let n_elems = (n_tokens * self.dim) as f64;
        let mut grad = vec![0.0; self.theta.len()];
        let o_b1 = in_dim * self.hidden;
        let o_w2 = o_b1 + self.hidden;
        let o_b2 = o_w2 + self.hidden * self.dim;
        let w2 = self.w2().to_vec();
        let mut loss = 0.0;
        for (input, target) in inputs.iter().zip(&eps.tokens) {
            let (hidden, out) = self.forward_token(input);
            // dL/dy for mean reduction over every element
            let dy: Vec<f64> = out
                .iter()
                .zip(target)
                .map(|(y, e)| {
                    loss += (y - e) * (y - e);
                    2.0 * (y - e) / n_elems
                })
                .collect();
            for j in 0..self.hidden {
                let mut dh = 0.0;
                for d in 0..self.dim {
                    grad[o_w2 + j * self.dim + d] += hidden[j] * dy[d];
                    dh += w2[j * self.dim + d] * dy[d];
                }
                let dpre = dh * (1.0 - hidden[j] * hidden[j]);
                grad[o_b1 + j] += dpre;
                for (i, &x) in input.iter().enumerate() {
                    grad[i * self.hidden + j] += x * dpre;
                }
            }
            for d in 0..self.dim {
                grad[o_b2 + d] += dy[d];
            }
        }
        Ok((loss / n_elems, grad))
    }
}

impl Denoiser for ToyDenoiser {
    fn predict(&self, seq: &TokenSequence, t: usize) -> Result<TokenSequence, DiffusionError> {
        let (inputs, _) = self.token_inputs(seq, t)?;
        let tokens: Vec<Vec<f64>> = inputs.iter().map(|x| self.forward_token(x).1).collect();
        TokenSequence::new(tokens, self.dim, TokenKind::Vision)
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
}

/// Denoiser returning a fixed sequence regardless of input; used by reverse
/// sampling oracles in tests.
pub struct OracleDenoiser {
    pub output: TokenSequence,
    empty: Vec<f64>,
}

impl OracleDenoiser {
    pub fn new(output: TokenSequence) -> Self {
        OracleDenoiser {
            output,
            empty: Vec::new(),
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, _seq: &TokenSequence, _t: usize) -> Result<TokenSequence, DiffusionError> {
        Ok(self.output.clone())
    }

    fn params(&self) -> &[f64] {
        &self.empty
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.empty
    }
}
