//! Post-norm encoder-decoder transformer over continuous sequences.
//!
//! Input rows are projected to `d_model`, summed with sinusoidal position
//! codes and encoded. The decoder starts from a learned query per output
//! position (plus its position code), runs self-attention, cross-attention
//! to the encoder memory and a feed-forward block per layer, and a final
//! affine map produces the output features.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Scalar, Tape, Var};
use super::{ModelConfig, ParamSet};

const QUERY_INIT_STD: f64 = 0.02;

/// Result of tracing a model on a tape.
#[derive(Debug, Clone)]
pub struct Traced {
    pub output: Var,
    /// Parameter leaves in registration order; empty for a frozen model.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

/// Parameter indices for every block of the network.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    input: Linear,
    queries: usize,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Linear,
}

#[derive(Default)]
struct Registry {
    entries: Vec<(String, (usize, usize))>,
}

impl Registry {
    fn add(&mut self, name: String, shape: (usize, usize)) -> usize {
        self.entries.push((name, shape));
        self.entries.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.w"), (fan_in, fan_out)),
            b: self.add(format!("{prefix}.b"), (1, fan_out)),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), (1, d)),
            beta: self.add(format!("{prefix}.beta"), (1, d)),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{prefix}.up"), d, d_ff),
            down: self.linear(&format!("{prefix}.down"), d_ff, d),
        }
    }
}

impl Layout {
    fn register(cfg: &ModelConfig) -> (Layout, Registry) {
        let d = cfg.d_model;
        let mut r = Registry::default();
        let input = r.linear("input", cfg.in_features, d);
        let queries = r.add("queries".into(), (cfg.out_len, d));
        let encoder = (0..cfg.n_layers)
            .map(|i| EncoderLayer {
                attn: r.attention(&format!("enc{i}.attn"), d),
                norm1: r.norm(&format!("enc{i}.norm1"), d),
                ff: r.feed_forward(&format!("enc{i}.ff"), d, cfg.d_ff),
                norm2: r.norm(&format!("enc{i}.norm2"), d),
            })
            .collect();
        let decoder = (0..cfg.n_layers)
            .map(|i| DecoderLayer {
                self_attn: r.attention(&format!("dec{i}.self"), d),
                norm1: r.norm(&format!("dec{i}.norm1"), d),
                cross_attn: r.attention(&format!("dec{i}.cross"), d),
                norm2: r.norm(&format!("dec{i}.norm2"), d),
                ff: r.feed_forward(&format!("dec{i}.ff"), d, cfg.d_ff),
                norm3: r.norm(&format!("dec{i}.norm3"), d),
            })
            .collect();
        let output = r.linear("output", d, cfg.out_features);
        (
            Layout {
                input,
                queries,
                encoder,
                decoder,
                output,
            },
            r,
        )
    }

    pub(crate) fn new(cfg: &ModelConfig) -> Layout {
        Self::register(cfg).0
    }
}

pub(crate) fn param_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    Layout::register(cfg).1.entries
}

/// Xavier-uniform weights, zero biases and shifts, unit gains, small
/// Gaussian decoder queries.
pub(crate) fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> (Layout, ParamSet<T>) {
    let (layout, registry) = Layout::register(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query_dist = Normal::new(0.0, QUERY_INIT_STD).unwrap();
    let mut names = Vec::with_capacity(registry.entries.len());
    let mut values = Vec::with_capacity(registry.entries.len());
    for (name, (r, c)) in registry.entries {
        let value = if name == "queries" {
            Array2::from_shape_fn((r, c), |_| T::from_f64_lossy(query_dist.sample(&mut rng)))
        } else if name.ends_with(".w") {
            let a = (6.0 / (r + c) as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| T::from_f64_lossy(rng.random_range(-a..a)))
        } else if name.ends_with(".gamma") {
            Array2::ones((r, c))
        } else {
            Array2::zeros((r, c))
        };
        names.push(name);
        values.push(value);
    }
    (layout, ParamSet { names, values })
}

pub(crate) fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    p: Vec<Var>,
    heads: usize,
    batch: usize,
    dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn linear(&mut self, x: Var, l: Linear) -> Var {
        self.tape.linear(x, self.p[l.w], self.p[l.b])
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        self.tape.layer_norm(x, self.p[n.gamma], self.p[n.beta])
    }

    fn drop(&mut self, x: Var) -> Var {
        let rng = match (&mut self.rng, self.dropout > 0.0) {
            (Some(rng), true) => rng,
            _ => return x,
        };
        let keep = 1.0 - self.dropout;
        let scale = T::from_f64_lossy(1.0 / keep);
        let dim = self.tape.value(x).dim();
        let mask = Array2::from_shape_fn(dim, |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        self.tape.mask(x, mask)
    }

    fn attention(&mut self, query: Var, memory: Var, a: Attention) -> Var {
        let q = self.linear(query, a.q);
        let k = self.linear(memory, a.k);
        let v = self.linear(memory, a.v);
        let mixed = self.tape.attention(q, k, v, self.heads, self.batch);
        self.linear(mixed, a.o)
    }

    fn feed_forward(&mut self, x: Var, f: FeedForward) -> Var {
        let h = self.linear(x, f.up);
        let h = self.tape.relu(h);
        self.linear(h, f.down)
    }

    /// `norm(x + dropout(sublayer))`
    fn residual(&mut self, x: Var, sub: Var, n: Norm) -> Var {
        let sub = self.drop(sub);
        let sum = self.tape.add(x, sub);
        self.norm(sum, n)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn trace<T: Scalar>(
    layout: &Layout,
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    trainable: bool,
    tape: &mut Tape<T>,
    input: Var,
    batch: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Traced {
    let p: Vec<Var> = params
        .values
        .iter()
        .map(|v| {
            if trainable {
                tape.param(v.clone())
            } else {
                tape.constant(v.clone())
            }
        })
        .collect();
    let param_vars = if trainable { p.clone() } else { Vec::new() };
    let mut cx = Ctx {
        tape,
        p,
        heads: cfg.n_heads,
        batch,
        dropout: cfg.dropout,
        rng,
    };

    let embedded = cx.linear(input, layout.input);
    let pe_in = cx.tape.constant(positional_encoding::<T>(cfg.in_len, cfg.d_model));
    let pe_in = cx.tape.tile_rows(pe_in, batch);
    let h = cx.tape.add(embedded, pe_in);
    let mut h = cx.drop(h);
    for layer in &layout.encoder {
        let a = cx.attention(h, h, layer.attn);
        h = cx.residual(h, a, layer.norm1);
        let f = cx.feed_forward(h, layer.ff);
        h = cx.residual(h, f, layer.norm2);
    }
    let memory = h;

    let pe_out = cx.tape.constant(positional_encoding::<T>(cfg.out_len, cfg.d_model));
    let queries = cx.tape.add(cx.p[layout.queries], pe_out);
    let y = cx.tape.tile_rows(queries, batch);
    let mut y = cx.drop(y);
    for layer in &layout.decoder {
        let a = cx.attention(y, y, layer.self_attn);
        y = cx.residual(y, a, layer.norm1);
        let c = cx.attention(y, memory, layer.cross_attn);
        y = cx.residual(y, c, layer.norm2);
        let f = cx.feed_forward(y, layer.ff);
        y = cx.residual(y, f, layer.norm3);
    }
    let output = cx.linear(y, layout.output);
    Traced {
        output,
        params: param_vars,
    }
}
