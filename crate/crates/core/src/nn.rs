//! Small trainable layers composed from tape operations.

use rand::Rng;

use crate::autograd::{xavier_uniform, Matrix, ParamId, ParamStore, Tape, Var};

/// Affine map `x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier_uniform(in_dim, out_dim, rng));
        let bias = Some(store.register(format!("{name}.bias"), Matrix::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Linear map `x W`.
    pub fn without_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier_uniform(in_dim, out_dim, rng));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let y = tape.matmul(x, tape.param(store, self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, tape.param(store, b)),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// One multi-head self-attention layer with a residual connection, applied
/// independently to each row's short token sequence. Tokens are given as one
/// `n x d` matrix per position. Keys carry no bias: a shared key offset
/// shifts every score of a query equally and cancels in the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl TokenSelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::without_bias(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, tokens: &[Var]) -> Vec<Var> {
        let d = self.query.out_dim;
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q: Vec<Var> = tokens.iter().map(|&x| self.query.forward(tape, store, x)).collect();
        let k: Vec<Var> = tokens.iter().map(|&x| self.key.forward(tape, store, x)).collect();
        let v: Vec<Var> = tokens.iter().map(|&x| self.value.forward(tape, store, x)).collect();

        tokens
            .iter()
            .enumerate()
            .map(|(a, &x)| {
                let heads: Vec<Var> = (0..self.heads)
                    .map(|h| {
                        let cols = (h * head_dim, (h + 1) * head_dim);
                        let qa = tape.slice_cols(q[a], cols.0, cols.1);
                        let scores: Vec<Var> = k
                            .iter()
                            .map(|&kb| tape.scale(tape.row_dot(qa, tape.slice_cols(kb, cols.0, cols.1)), scale))
                            .collect();
                        let probs = tape.softmax_rows(tape.concat_cols(&scores));
                        let mut mixed: Option<Var> = None;
                        for (b, &vb) in v.iter().enumerate() {
                            let weight = tape.slice_cols(probs, b, b + 1);
                            let term = tape.row_scale(tape.slice_cols(vb, cols.0, cols.1), weight);
                            mixed = Some(match mixed {
                                Some(acc) => tape.add(acc, term),
                                None => term,
                            });
                        }
                        mixed.expect("at least one token")
                    })
                    .collect();
                let attended = self.output.forward(tape, store, tape.concat_cols(&heads));
                tape.add(x, attended)
            })
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
