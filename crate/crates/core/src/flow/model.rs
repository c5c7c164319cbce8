use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Generator, LN_2PI};
use crate::error::{Error, Result};
use crate::ndcore::{Axis, Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Flattened context passed through unchanged.
    Base,
    Mlp,
    Cnn,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Base => "base",
            EncoderKind::Mlp => "mlp",
            EncoderKind::Cnn => "cnn",
        })
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(EncoderKind::Base),
            "mlp" => Ok(EncoderKind::Mlp),
            "cnn" => Ok(EncoderKind::Cnn),
            other => Err(Error::invalid(format!("unknown encoder kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Channels `D` (>= 2).
    pub dim: usize,
    /// Context length `k`.
    pub window: usize,
    pub n_layers: usize,
    /// Hidden width of every `s` / `t` conditioner.
    pub hidden: usize,
    pub encoder: EncoderKind,
    /// Output width of the mlp / cnn encoders.
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub cnn_filters: usize,
    pub cnn_kernel: usize,
    /// Scale clamp: `s = s_max·tanh(ŝ / s_max)`.
    pub s_max: f64,
}

impl FlowConfig {
    pub fn new(dim: usize, window: usize, n_layers: usize, encoder: EncoderKind) -> Self {
        FlowConfig {
            dim,
            window,
            n_layers,
            hidden: 64,
            encoder,
            embed_dim: 32,
            encoder_hidden: 64,
            cnn_filters: 16,
            cnn_kernel: 3,
            s_max: 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid(format!("flow needs D >= 2, got {}", self.dim)));
        }
        if self.window == 0 || self.n_layers == 0 || self.hidden == 0 {
            return Err(Error::invalid("window, layer count and hidden width must be positive"));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::invalid("s_max must be positive"));
        }
        match self.encoder {
            EncoderKind::Base => {}
            EncoderKind::Mlp => {
                if self.embed_dim == 0 || self.encoder_hidden == 0 {
                    return Err(Error::invalid("mlp encoder widths must be positive"));
                }
            }
            EncoderKind::Cnn => {
                if self.embed_dim == 0 || self.cnn_filters == 0 || self.cnn_kernel == 0 {
                    return Err(Error::invalid("cnn encoder sizes must be positive"));
                }
                if self.window < self.cnn_kernel {
                    return Err(Error::invalid(format!(
                        "cnn kernel {} longer than window {}",
                        self.cnn_kernel, self.window
                    )));
                }
            }
        }
        Ok(())
    }

    /// Width of the context embedding `h` fed to every conditioner.
    pub fn context_width(&self) -> usize {
        match self.encoder {
            EncoderKind::Base => self.window * self.dim,
            EncoderKind::Mlp | EncoderKind::Cnn => self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct TwoLayer {
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
enum Encoder {
    Identity,
    Mlp(TwoLayer),
    Cnn { conv: Dense, out: Dense },
}

#[derive(Debug, Clone)]
struct Coupling {
    passive: Vec<usize>,
    active: Vec<usize>,
    /// Undoes `[passive, active]` concatenation order.
    unpermute: Vec<usize>,
    s_net: TwoLayer,
    t_net: TwoLayer,
}

/// Choice of latent point for [`FlowModel::sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZChoice {
    /// The base distribution's mean, `z = 0`.
    Mean,
    Random(u64),
}

/// Conditional RealNVP-style flow; see the module docs.
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    params: ParamStore,
    encoder: Encoder,
    layers: Vec<Coupling>,
}

fn dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut ChaCha8Rng) -> Dense {
    let w = if zero {
        store.zeros(format!("{name}.w"), fan_in, fan_out)
    } else {
        store.uniform(format!("{name}.w"), fan_in, fan_out, rng)
    };
    let b = store.zeros(format!("{name}.b"), 1, fan_out);
    Dense { w, b }
}

impl FlowModel {
    /// Fresh model. Conditioner output layers start at zero, so the flow is
    /// the identity map until trained.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let ctx_in = config.window * d;
        let encoder = match config.encoder {
            EncoderKind::Base => Encoder::Identity,
            EncoderKind::Mlp => Encoder::Mlp(TwoLayer {
                hidden: dense(&mut store, "enc.hidden", ctx_in, config.encoder_hidden, false, &mut rng),
                out: dense(&mut store, "enc.out", config.encoder_hidden, config.embed_dim, false, &mut rng),
            }),
            EncoderKind::Cnn => {
                let positions = config.window - config.cnn_kernel + 1;
                Encoder::Cnn {
                    conv: dense(&mut store, "enc.conv", config.cnn_kernel * d, config.cnn_filters, false, &mut rng),
                    out: dense(&mut store, "enc.out", positions * config.cnn_filters, config.embed_dim, false, &mut rng),
                }
            }
        };
        let h = config.context_width();
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let passive: Vec<usize> = (0..d).filter(|c| c % 2 == i % 2).collect();
            let active: Vec<usize> = (0..d).filter(|c| c % 2 != i % 2).collect();
            let order: Vec<usize> = passive.iter().chain(&active).copied().collect();
            let mut unpermute = vec![0; d];
            for (pos, &c) in order.iter().enumerate() {
                unpermute[c] = pos;
            }
            let input = passive.len() + h;
            let mut net = |tag: &str, rng: &mut ChaCha8Rng| TwoLayer {
                hidden: dense(&mut store, &format!("layer{i}.{tag}.hidden"), input, config.hidden, false, rng),
                out: dense(&mut store, &format!("layer{i}.{tag}.out"), config.hidden, active.len(), true, rng),
            };
            let s_net = net("s", &mut rng);
            let t_net = net("t", &mut rng);
            layers.push(Coupling {
                passive,
                active,
                unpermute,
                s_net,
                t_net,
            });
        }
        Ok(FlowModel {
            config,
            params: store,
            encoder,
            layers,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    /// Masks as `(passive, active)` channel lists per layer.
    pub fn masks(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.layers.iter().map(|l| (l.passive.clone(), l.active.clone())).collect()
    }

    /// Adds `N(0, scale²)` noise to every parameter.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.params.values_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += scale * n;
        }
    }

    /// Sets a named output layer directly; used to build closed-form models.
    pub fn set_param(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let id = self
            .params
            .ids()
            .find(|&id| self.params.name(id) == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        let dst = self.params.slot_values_mut(id);
        if dst.len() != values.len() {
            return Err(Error::invalid(format!("{name} has {} entries", dst.len())));
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.ids().map(|id| self.params.name(id).to_owned()).collect()
    }

    fn check_inputs(&self, x_cols: usize, ctx: &Matrix, rows: usize) -> Result<()> {
        if x_cols != self.config.dim {
            return Err(Error::invalid(format!(
                "observation has {x_cols} channels, model expects {}",
                self.config.dim
            )));
        }
        let want = self.config.window * self.config.dim;
        if ctx.cols() != want || ctx.rows() != rows {
            return Err(Error::invalid(format!(
                "context is {}x{}, expected {rows}x{want}",
                ctx.rows(),
                ctx.cols()
            )));
        }
        Ok(())
    }
}

/// Parameter leaves of one model bound on one tape.
pub(crate) struct Bound<'m> {
    model: &'m FlowModel,
    nodes: Vec<NodeId>,
}

impl<'m> Bound<'m> {
    pub(crate) fn new(model: &'m FlowModel, tape: &mut Tape) -> Self {
        let nodes = model.params.ids().map(|id| tape.param(&model.params, id)).collect();
        Bound { model, nodes }
    }

    fn p(&self, id: ParamId) -> NodeId {
        self.nodes[id.index()]
    }

    fn dense(&self, tape: &mut Tape, d: &Dense, x: NodeId) -> Result<NodeId> {
        let y = tape.matmul(x, self.p(d.w))?;
        tape.add(y, self.p(d.b))
    }

    fn two_layer(&self, tape: &mut Tape, net: &TwoLayer, x: NodeId) -> Result<NodeId> {
        let h = self.dense(tape, &net.hidden, x)?;
        let h = tape.tanh(h)?;
        self.dense(tape, &net.out, h)
    }

    pub(crate) fn encode(&self, tape: &mut Tape, ctx: NodeId) -> Result<NodeId> {
        let cfg = &self.model.config;
        match &self.model.encoder {
            Encoder::Identity => Ok(ctx),
            Encoder::Mlp(net) => self.two_layer(tape, net, ctx),
            Encoder::Cnn { conv, out } => {
                let d = cfg.dim;
                let span = cfg.cnn_kernel * d;
                let mut maps = Vec::with_capacity(cfg.window - cfg.cnn_kernel + 1);
                for p in 0..=cfg.window - cfg.cnn_kernel {
                    let patch = tape.slice(ctx, (p * d..p * d + span).collect())?;
                    let f = self.dense(tape, conv, patch)?;
                    maps.push(tape.tanh(f)?);
                }
                let flat = tape.concat(maps)?;
                self.dense(tape, out, flat)
            }
        }
    }

    fn conditioner(&self, tape: &mut Tape, layer: &Coupling, passive: NodeId, h: NodeId) -> Result<(NodeId, NodeId)> {
        let input = tape.concat(vec![passive, h])?;
        let s_raw = self.two_layer(tape, &layer.s_net, input)?;
        let s_max = self.model.config.s_max;
        let s = tape.scale(s_raw, 1.0 / s_max)?;
        let s = tape.tanh(s)?;
        let s = tape.scale(s, s_max)?;
        let t = self.two_layer(tape, &layer.t_net, input)?;
        Ok((s, t))
    }

    /// `(z, logdet)` with `logdet` as `B x 1`.
    pub(crate) fn forward(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<(NodeId, NodeId)> {
        let mut cur = x;
        let mut logdet: Option<NodeId> = None;
        for (i, layer) in self.model.layers.iter().enumerate() {
            let passive = tape.slice(cur, layer.passive.clone())?;
            let active = tape.slice(cur, layer.active.clone())?;
            let (s, t) = self.conditioner(tape, layer, passive, h)?;
            let scale = tape.exp(s)?;
            let moved = tape.mul(active, scale)?;
            let moved = tape.add(moved, t)?;
            let joined = tape.concat(vec![passive, moved])?;
            cur = tape.slice(joined, layer.unpermute.clone())?;
            if !tape.value(cur).is_finite() {
                return Err(Error::NonFiniteLayer { layer: i });
            }
            let ld = tape.sum(s, Axis::Cols)?;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((cur, logdet.expect("at least one layer")))
    }

    pub(crate) fn inverse(&self, tape: &mut Tape, z: NodeId, h: NodeId) -> Result<NodeId> {
        let mut cur = z;
        for (i, layer) in self.model.layers.iter().enumerate().rev() {
            let passive = tape.slice(cur, layer.passive.clone())?;
            let active = tape.slice(cur, layer.active.clone())?;
            let (s, t) = self.conditioner(tape, layer, passive, h)?;
            let shifted = tape.sub(active, t)?;
            let neg_s = tape.scale(s, -1.0)?;
            let inv_scale = tape.exp(neg_s)?;
            let restored = tape.mul(shifted, inv_scale)?;
            let joined = tape.concat(vec![passive, restored])?;
            cur = tape.slice(joined, layer.unpermute.clone())?;
            if !tape.value(cur).is_finite() {
                return Err(Error::NonFiniteLayer { layer: i });
            }
        }
        Ok(cur)
    }

    /// Per-row negative log-likelihood, `B x 1`.
    pub(crate) fn nll_rows(&self, tape: &mut Tape, x: NodeId, ctx: NodeId) -> Result<NodeId> {
        let h = self.encode(tape, ctx)?;
        let (z, logdet) = self.forward(tape, x, h)?;
        let sq = tape.mul(z, z)?;
        let sq = tape.sum(sq, Axis::Cols)?;
        let half = tape.scale(sq, 0.5)?;
        let base = tape.offset(half, 0.5 * self.model.config.dim as f64 * LN_2PI)?;
        tape.sub(base, logdet)
    }
}

impl FlowModel {
    /// Batched normalizing direction: `(z, logdet)` per row.
    pub fn forward_batch(&self, x: &Matrix, ctx: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check_inputs(x.cols(), ctx, x.rows())?;
        let mut tape = Tape::new();
        let bound = Bound::new(self, &mut tape);
        let xn = tape.constant(x.clone());
        let cn = tape.constant(ctx.clone());
        let h = bound.encode(&mut tape, cn)?;
        let (z, ld) = bound.forward(&mut tape, xn, h)?;
        Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
    }

    /// `z = F(x | w)` and `log|det J|` for one observation; `w` is `k x D`.
    pub fn forward(&self, x: &[f64], w: &Matrix) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.forward_batch(&Matrix::row_vector(x.to_vec()), &flatten_context(w))?;
        Ok((z.into_vec(), ld[0]))
    }

    /// Batched generative direction.
    pub fn inverse_batch(&self, z: &Matrix, ctx: &Matrix) -> Result<Matrix> {
        self.check_inputs(z.cols(), ctx, z.rows())?;
        if !z.is_finite() {
            return Err(Error::NonFinite {
                context: "latent input".into(),
            });
        }
        let mut tape = Tape::new();
        let bound = Bound::new(self, &mut tape);
        let zn = tape.constant(z.clone());
        let cn = tape.constant(ctx.clone());
        let h = bound.encode(&mut tape, cn)?;
        let x = bound.inverse(&mut tape, zn, h)?;
        Ok(tape.value(x).clone())
    }

    pub fn inverse(&self, z: &[f64], w: &Matrix) -> Result<Vec<f64>> {
        Ok(self
            .inverse_batch(&Matrix::row_vector(z.to_vec()), &flatten_context(w))?
            .into_vec())
    }

    /// `log p(x | w)` per row.
    pub fn log_likelihood_batch(&self, x: &Matrix, ctx: &Matrix) -> Result<Vec<f64>> {
        self.check_inputs(x.cols(), ctx, x.rows())?;
        let mut tape = Tape::new();
        let bound = Bound::new(self, &mut tape);
        let xn = tape.constant(x.clone());
        let cn = tape.constant(ctx.clone());
        let nll = bound.nll_rows(&mut tape, xn, cn)?;
        Ok(tape.value(nll).data().iter().map(|v| -v).collect())
    }

    pub fn log_likelihood(&self, x: &[f64], w: &Matrix) -> Result<f64> {
        Ok(self.log_likelihood_batch(&Matrix::row_vector(x.to_vec()), &flatten_context(w))?[0])
    }

    pub fn sample(&self, w: &Matrix, z: ZChoice) -> Result<Vec<f64>> {
        let d = self.config.dim;
        let latent = match z {
            ZChoice::Mean => vec![0.0; d],
            ZChoice::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
        };
        self.inverse(&latent, w)
    }

    /// Rebuilds a model from a config and a flat parameter vector.
    pub fn from_parts(config: FlowConfig, values: &[f64]) -> Result<Self> {
        let mut model = FlowModel::new(config, 0)?;
        if values.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, layout needs {}",
                values.len(),
                model.params.len()
            )));
        }
        model.params.set_values(values);
        Ok(model)
    }
}

impl Generator for FlowModel {
    fn window(&self) -> usize {
        self.config.window
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn generate(&self, contexts: &Matrix) -> Result<Matrix> {
        self.inverse_batch(&Matrix::zeros(contexts.rows(), self.config.dim), contexts)
    }
}

/// `k x D` context (row `j` = `x_{t-1-j}`) as a `1 x kD` row.
pub(crate) fn flatten_context(w: &Matrix) -> Matrix {
    Matrix::row_vector(w.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(k: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_vec(k, d, data).unwrap()
    }

    #[test]
    fn identity_at_initialization() {
        for kind in [EncoderKind::Base, EncoderKind::Mlp, EncoderKind::Cnn] {
            let m = FlowModel::new(FlowConfig::new(3, 4, 3, kind), 1).unwrap();
            let (z, ld) = m.forward(&[0.3, -1.0, 2.0], &ctx(4, 3, 2)).unwrap();
            assert_eq!(z, vec![0.3, -1.0, 2.0]);
            assert_eq!(ld, 0.0);
            assert_eq!(m.inverse(&[0.3, -1.0, 2.0], &ctx(4, 3, 2)).unwrap(), vec![0.3, -1.0, 2.0]);
        }
    }

    #[test]
    fn closed_form_single_layer() {
        let mut cfg = FlowConfig::new(2, 1, 1, EncoderKind::Base);
        cfg.hidden = 4;
        // Saturating the clamp would bend ln 2, so widen it.
        cfg.s_max = 1e6;
        let mut m = FlowModel::new(cfg, 0).unwrap();
        assert_eq!(m.masks()[0], (vec![0], vec![1]));
        m.set_param("layer0.s.out.b", &[std::f64::consts::LN_2]).unwrap();
        m.set_param("layer0.t.out.b", &[1.0]).unwrap();
        let w = Matrix::zeros(1, 2);
        let (z, ld) = m.forward(&[0.5, 1.0], &w).unwrap();
        assert_eq!(z[0], 0.5);
        assert!((z[1] - 3.0).abs() < 1e-9);
        assert!((ld - std::f64::consts::LN_2).abs() < 1e-9);
        let x = m.inverse(&[0.5, 3.0], &w).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_log_likelihood_is_standard_normal() {
        let m = FlowModel::new(FlowConfig::new(2, 3, 2, EncoderKind::Base), 0).unwrap();
        let w = ctx(3, 2, 0);
        assert!((m.log_likelihood(&[0.0, 0.0], &w).unwrap() + LN_2PI).abs() < 1e-15);
        assert!((m.log_likelihood(&[1.0, 0.0], &w).unwrap() + LN_2PI + 0.5).abs() < 1e-15);
    }

    #[test]
    fn sampling_identity_model() {
        let m = FlowModel::new(FlowConfig::new(2, 3, 2, EncoderKind::Mlp), 0).unwrap();
        let w = ctx(3, 2, 4);
        assert_eq!(m.sample(&w, ZChoice::Mean).unwrap(), vec![0.0, 0.0]);
        let a = m.sample(&w, ZChoice::Random(11)).unwrap();
        let b = m.sample(&w, ZChoice::Random(11)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(a, z);
    }

    #[test]
    fn d1_rejected_and_cnn_window_checked() {
        assert!(FlowModel::new(FlowConfig::new(1, 3, 2, EncoderKind::Base), 0).is_err());
        assert!(FlowModel::new(FlowConfig::new(2, 2, 2, EncoderKind::Cnn), 0).is_err());
    }

    #[test]
    fn context_changes_likelihood() {
        for kind in [EncoderKind::Base, EncoderKind::Mlp, EncoderKind::Cnn] {
            let mut m = FlowModel::new(FlowConfig::new(2, 4, 2, kind), 3).unwrap();
            m.perturb(5, 0.3);
            let x = [0.2, -0.4];
            let a = m.log_likelihood(&x, &ctx(4, 2, 1)).unwrap();
            let b = m.log_likelihood(&x, &ctx(4, 2, 2)).unwrap();
            assert!((a - b).abs() > 1e-6, "{kind}: {a} vs {b}");
        }
    }

    #[test]
    fn scale_clamp_holds() {
        let mut m = FlowModel::new(FlowConfig::new(2, 2, 2, EncoderKind::Base), 0).unwrap();
        m.perturb(1, 50.0);
        let (_, ld) = m.forward(&[1.0, 1.0], &ctx(2, 2, 0)).unwrap();
        // Each of the 2 layers contributes |s| <= s_max on one channel; tanh may saturate.
        assert!(ld.is_finite() && ld.abs() <= 2.0 * 2.0);
    }
}
