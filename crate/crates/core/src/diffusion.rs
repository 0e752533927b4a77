//! The frozen generative world: condition encoder, score network, low-rank
//! adapters, and the pretraining loop that produces the (deliberately
//! imperfect) base model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::Error;
use crate::optim::{Adam, AdamConfig};
use crate::sampling::add_noise;
use crate::schedule::NoiseSchedule;
use crate::util::{derive_rng, hash_f64s, standard_normal};
use crate::{Result, Tensor};

/// Width of the sinusoidal time-feature block fed to the score network.
pub const TIME_DIM: usize = 8;

/// Prompt identity: a vocabulary class or the reserved null prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prompt {
    Null,
    Class(usize),
}

/// Frozen table of per-class embeddings plus the null-text embedding φ.
///
/// No method mutates the table after construction; `fingerprint` is a
/// content hash of table + φ and is checked whenever a negative embedding
/// is used with this encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionEncoder {
    names: Vec<String>,
    table: Vec<Vec<f64>>,
    null_embedding: Vec<f64>,
    d_e: usize,
    fingerprint: String,
}

impl ConditionEncoder {
    pub fn random(names: Vec<String>, d_e: usize, seed: u64) -> Result<Self> {
        if names.is_empty() || d_e == 0 {
            return Err(Error::invalid("encoder needs at least one class and d_e >= 1"));
        }
        let mut rng = derive_rng(seed, 0);
        let table: Vec<Vec<f64>> = (0..names.len())
            .map(|_| standard_normal(&mut rng, d_e))
            .collect();
        let null_embedding = standard_normal(&mut rng, d_e);
        // Distinct prompts must map to distinct embeddings.
        let mut all: Vec<&Vec<f64>> = table.iter().collect();
        all.push(&null_embedding);
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                let dist: f64 = all[i]
                    .iter()
                    .zip(all[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist == 0.0 {
                    return Err(Error::invalid(format!(
                        "embedding collision between entries {i} and {j}"
                    )));
                }
            }
        }
        let fingerprint = Self::compute_fingerprint(&table, &null_embedding);
        Ok(ConditionEncoder {
            names,
            table,
            null_embedding,
            d_e,
            fingerprint,
        })
    }

    fn compute_fingerprint(table: &[Vec<f64>], null_embedding: &[f64]) -> String {
        hash_f64s(
            table
                .iter()
                .flat_map(|row| row.iter().copied())
                .chain(null_embedding.iter().copied()),
        )
    }

    /// Frozen table lookup; the null prompt returns φ.
    pub fn encode(&self, prompt: Prompt) -> Result<Tensor> {
        match prompt {
            Prompt::Null => Ok(Tensor::vector(self.null_embedding.clone())),
            Prompt::Class(id) => {
                let row = self.table.get(id).ok_or_else(|| {
                    Error::invalid(format!(
                        "unknown prompt class {id}, vocabulary has {} entries",
                        self.table.len()
                    ))
                })?;
                Ok(Tensor::vector(row.clone()))
            }
        }
    }

    pub fn class_name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recomputes the content hash; used to verify loaded checkpoints.
    pub fn verify_fingerprint(&self) -> bool {
        Self::compute_fingerprint(&self.table, &self.null_embedding) == self.fingerprint
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// [out, in]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
}

/// Low-rank adapter on one dense layer: effective weight = base + A·B,
/// so a zero A or B leaves the network unchanged.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    pub layer: usize,
    pub rank: usize,
    /// [out, rank]
    pub a: Tensor,
    /// [rank, in]
    pub b: Tensor,
}

impl LowRankAdapter {
    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Dense noise predictor ε_θ(x_t, c, t): three layers, smooth nonlinearity,
/// input = concat(x_t, time features, condition embedding), zero-initialized
/// final layer. Time is fed as t/T so the net is usable under resampled
/// schedules.
#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    pub d_x: usize,
    pub d_e: usize,
    pub width: usize,
    /// The condition input is fed as (c − cond_offset); the offset is the
    /// encoder's φ. Combined with zero-initialized condition columns this
    /// makes the net exactly condition-independent until conditions are
    /// actually seen in training.
    cond_offset: Vec<f64>,
    layers: Vec<DenseLayer>,
    adapters: Vec<LowRankAdapter>,
}

impl ScoreNetwork {
    pub fn new(d_x: usize, d_e: usize, width: usize, seed: u64, cond_offset: Vec<f64>) -> Result<Self> {
        if d_x == 0 || d_e == 0 || width == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if cond_offset.len() != d_e {
            return Err(Error::invalid("cond_offset length must equal d_e"));
        }
        let mut rng = derive_rng(seed, 0);
        let in_dim = d_x + TIME_DIM + d_e;
        let dims = [(width, in_dim), (width, width), (d_x, width)];
        let mut layers = Vec::with_capacity(3);
        for (i, &(out, inp)) in dims.iter().enumerate() {
            let scale = 1.0 / (inp as f64).sqrt();
            let weight = if i == dims.len() - 1 {
                vec![0.0; out * inp]
            } else {
                let mut w: Vec<f64> = standard_normal(&mut rng, out * inp)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                if i == 0 {
                    // Condition columns start at zero; see cond_offset.
                    for r in 0..out {
                        for c in (d_x + TIME_DIM)..inp {
                            w[r * inp + c] = 0.0;
                        }
                    }
                }
                w
            };
            layers.push(DenseLayer {
                weight: Tensor::matrix(out, inp, weight)?,
                bias: Tensor::vector(vec![0.0; out]),
            });
        }
        Ok(ScoreNetwork {
            d_x,
            d_e,
            width,
            cond_offset,
            layers,
            adapters: Vec::new(),
        })
    }

    pub fn layer_dims(&self, layer: usize) -> Option<(usize, usize)> {
        self.layers.get(layer).map(|l| (l.weight.shape()[0], l.weight.shape()[1]))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn adapters(&self) -> &[LowRankAdapter] {
        &self.adapters
    }

    /// Base θ in a fixed order: (w, b) per layer.
    pub fn base_params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn base_param_count(&self) -> usize {
        self.base_params().iter().map(|t| t.numel()).sum()
    }

    /// Content hash of base θ, for frozen-world checks.
    pub fn params_hash(&self) -> String {
        hash_f64s(
            self.base_params()
                .iter()
                .flat_map(|t| t.data().to_vec()),
        )
    }

    /// Clone with base parameters replaced (e.g. by taped leaves); order as
    /// in [`Self::base_params`]. Shapes must match.
    pub fn with_base_params(&self, params: &[Tensor]) -> Result<Self> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::invalid("wrong number of base parameter tensors"));
        }
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            let w = &params[2 * i];
            let b = &params[2 * i + 1];
            if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::invalid(format!("parameter shape mismatch at layer {i}")));
            }
            layer.weight = w.clone();
            layer.bias = b.clone();
        }
        Ok(out)
    }

    /// Adapter params in a fixed order: (a, b) per adapter.
    pub fn adapter_params(&self) -> Vec<Tensor> {
        self.adapters
            .iter()
            .flat_map(|ad| [ad.a.clone(), ad.b.clone()])
            .collect()
    }

    pub fn with_adapter_params(&self, params: &[Tensor]) -> Result<Self> {
        if params.len() != 2 * self.adapters.len() {
            return Err(Error::invalid("wrong number of adapter parameter tensors"));
        }
        let mut out = self.clone();
        for (i, ad) in out.adapters.iter_mut().enumerate() {
            ad.a = params[2 * i].clone();
            ad.b = params[2 * i + 1].clone();
        }
        Ok(out)
    }

    /// Attaches a rank-r adapter to `layer`. A gets small random values,
    /// B starts at zero, so the network output is unchanged until B moves.
    pub fn attach_adapter(&mut self, layer: usize, rank: usize, seed: u64) -> Result<()> {
        let (out, inp) = self
            .layer_dims(layer)
            .ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
        if rank == 0 || rank > out.min(inp) {
            return Err(Error::invalid(format!(
                "rank {rank} out of range 1..={}",
                out.min(inp)
            )));
        }
        if self.adapters.iter().any(|a| a.layer == layer) {
            return Err(Error::invalid(format!("layer {layer} already has an adapter")));
        }
        let mut rng = derive_rng(seed, 0);
        let a: Vec<f64> = standard_normal(&mut rng, out * rank)
            .into_iter()
            .map(|v| v * 0.1 / rank as f64)
            .collect();
        self.adapters.push(LowRankAdapter {
            layer,
            rank,
            a: Tensor::matrix(out, rank, a)?,
            b: Tensor::matrix(rank, inp, vec![0.0; rank * inp])?,
        });
        Ok(())
    }

    fn effective_weight(&self, layer: usize) -> Result<Tensor> {
        let base = &self.layers[layer].weight;
        match self.adapters.iter().find(|a| a.layer == layer) {
            Some(ad) => {
                Ok(base.add(&ad.a.matmul(&ad.b)?)?)
            }
            None => Ok(base.clone()),
        }
    }

    /// Sinusoidal features of normalized time t/T.
    pub fn time_features(t: usize, t_max: usize) -> Tensor {
        let tau = t as f64 / t_max as f64;
        let mut feats = Vec::with_capacity(TIME_DIM);
        for k in 0..(TIME_DIM / 2) {
            let angle = tau * std::f64::consts::PI * (1 << k) as f64;
            feats.push(angle.sin());
            feats.push(angle.cos());
        }
        Tensor::vector(feats)
    }

    /// ε_θ(x_t, c, t). Differentiable w.r.t. x_t, c, and any taped
    /// parameters. t must lie in [1, T] of the given schedule.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        cond: &Tensor,
        t: usize,
        schedule: &NoiseSchedule<f64>,
    ) -> Result<Tensor> {
        if t < 1 || t > schedule.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} out of range 1..={}",
                schedule.steps()
            )));
        }
        if x_t.shape() != [self.d_x] {
            return Err(Error::invalid(format!(
                "x_t shape {:?} does not match d_x {}",
                x_t.shape(),
                self.d_x
            )));
        }
        if cond.shape() != [self.d_e] {
            return Err(Error::invalid(format!(
                "condition shape {:?} does not match d_e {}",
                cond.shape(),
                self.d_e
            )));
        }
        let tf = Self::time_features(t, schedule.steps());
        let offset = Tensor::vector(self.cond_offset.clone());
        let centered = cond.sub(&offset)?;
        let mut h = Tensor::concat(&[x_t, &tf, &centered])?;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let w = self.effective_weight(i)?;
            h = w.matvec(&h)?.add(&self.layers[i].bias)?;
            if i != last {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Condition-dropout probability: c is replaced by φ per sample.
    pub p_drop: f64,
    pub seed: u64,
}

/// Minimizes E ||ε_θ(x_t, E(c), t) − ε||² over the dataset, with condition
/// dropout, returning the trained network and the per-step loss curve.
/// Fully deterministic given the config seed.
pub fn pretrain(
    net: &ScoreNetwork,
    encoder: &ConditionEncoder,
    schedule: &NoiseSchedule<f64>,
    dataset: &[(Prompt, Vec<f64>)],
    config: &PretrainConfig,
) -> Result<(ScoreNetwork, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut params: Vec<Vec<f64>> = net.base_params().iter().map(|t| t.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = net.base_params().iter().map(|t| t.shape().to_vec()).collect();
    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(AdamConfig::adam(config.learning_rate), &sizes);
    let mut rng = derive_rng(config.seed, 0);
    let mut losses = Vec::with_capacity(config.steps);
    let phi = encoder.encode(Prompt::Null)?;

    for _ in 0..config.steps {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = params
            .iter()
            .zip(&shapes)
            .map(|(p, s)| tape.leaf(&Tensor::new(s.clone(), p.clone()).expect("param shape")))
            .collect();
        let step_net = net.with_base_params(&leaves)?;

        // Explicit accumulation in batch order keeps summation deterministic.
        let mut acc: Option<Tensor> = None;
        for _ in 0..config.batch_size {
            let (prompt, x0) = &dataset[rng.gen_range(0..dataset.len())];
            let t = rng.gen_range(1..=schedule.steps());
            let eps = Tensor::vector(standard_normal(&mut rng, net.d_x));
            let dropped = rng.gen::<f64>() < config.p_drop;
            let cond = if dropped { phi.clone() } else { encoder.encode(*prompt)? };
            let x_t = add_noise(&Tensor::vector(x0.clone()), &eps, t, schedule)?;
            let eps_hat = step_net.predict_noise(&x_t, &cond, t, schedule)?;
            let loss = eps_hat.sub(&eps)?.square()?.sum()?;
            acc = Some(match acc {
                Some(a) => a.add(&loss)?,
                None => loss,
            });
        }
        let loss = acc.unwrap().scale(1.0 / config.batch_size as f64)?;
        losses.push(loss.item());
        let grads_map = tape.backward(&loss)?;
        let grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| grads_map.wrt(l).expect("leaf gradient").data().to_vec())
            .collect();
        opt.step(&mut params, &grads);
    }

    let tensors: Vec<Tensor> = params
        .into_iter()
        .zip(&shapes)
        .map(|(p, s)| Tensor::new(s.clone(), p).expect("param shape"))
        .collect();
    Ok((net.with_base_params(&tensors)?, losses))
}

// --- checkpoint serialization -----------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub d_x: usize,
    pub d_e: usize,
    pub time_dim: usize,
    pub width: usize,
    pub cond_offset: Vec<f64>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub layer: usize,
    pub rank: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Versioned on-disk form of a pretrained world. See docs/schemas.md.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schedule: NoiseSchedule<f64>,
    pub encoder: ConditionEncoder,
    pub network: NetworkSpec,
    pub adapters: Vec<AdapterSpec>,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl ScoreNetwork {
    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            d_x: self.d_x,
            d_e: self.d_e,
            time_dim: TIME_DIM,
            width: self.width,
            cond_offset: self.cond_offset.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    rows: l.weight.shape()[0],
                    cols: l.weight.shape()[1],
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_spec(spec: &NetworkSpec, adapters: &[AdapterSpec]) -> Result<Self> {
        if spec.time_dim != TIME_DIM {
            return Err(Error::invalid(format!(
                "checkpoint time_dim {} unsupported (expected {TIME_DIM})",
                spec.time_dim
            )));
        }
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                Ok(DenseLayer {
                    weight: Tensor::matrix(l.rows, l.cols, l.weight.clone())?,
                    bias: Tensor::vector(l.bias.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let adapters = adapters
            .iter()
            .map(|a| {
                let (rows, cols) = (
                    spec.layers[a.layer].rows,
                    spec.layers[a.layer].cols,
                );
                Ok(LowRankAdapter {
                    layer: a.layer,
                    rank: a.rank,
                    a: Tensor::matrix(rows, a.rank, a.a.clone())?,
                    b: Tensor::matrix(a.rank, cols, a.b.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreNetwork {
            d_x: spec.d_x,
            d_e: spec.d_e,
            width: spec.width,
            cond_offset: spec.cond_offset.clone(),
            layers,
            adapters,
        })
    }

    pub fn adapter_specs(&self) -> Vec<AdapterSpec> {
        self.adapters
            .iter()
            .map(|a| AdapterSpec {
                layer: a.layer,
                rank: a.rank,
                a: a.a.data().to_vec(),
                b: a.b.data().to_vec(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::sampling;

    fn world(seed: u64) -> (ConditionEncoder, NoiseSchedule<f64>, ScoreNetwork) {
        let names = (0..4).map(|i| format!("class{i}")).collect();
        let encoder = ConditionEncoder::random(names, 6, seed).unwrap();
        let schedule = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let phi = encoder.encode(Prompt::Null).unwrap().data().to_vec();
        let net = ScoreNetwork::new(2, 6, 24, seed + 1, phi).unwrap();
        (encoder, schedule, net)
    }

    /// Network with every weight randomized (the default init zeroes the
    /// condition columns and the final layer, which would hide gradients).
    fn randomized(net: &ScoreNetwork, seed: u64) -> ScoreNetwork {
        let mut rng = derive_rng(seed, 0);
        let params: Vec<Tensor> = net
            .base_params()
            .iter()
            .map(|p| {
                let data = standard_normal(&mut rng, p.numel())
                    .into_iter()
                    .map(|v| v * 0.3)
                    .collect();
                Tensor::new(p.shape().to_vec(), data).unwrap()
            })
            .collect();
        net.with_base_params(&params).unwrap()
    }

    #[test]
    fn encoder_null_returns_phi_and_lookups_are_frozen() {
        let (encoder, _, _) = world(3);
        let phi1 = encoder.encode(Prompt::Null).unwrap();
        let phi2 = encoder.encode(Prompt::Null).unwrap();
        assert_eq!(phi1.data(), phi2.data());
        let a = encoder.encode(Prompt::Class(0)).unwrap();
        let b = encoder.encode(Prompt::Class(0)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encoder_distinct_classes_are_distinct() {
        let (encoder, _, _) = world(3);
        let a = encoder.encode(Prompt::Class(0)).unwrap();
        let b = encoder.encode(Prompt::Class(1)).unwrap();
        let dist = a.sub(&b).unwrap().l2_norm().unwrap().item();
        assert!(dist > 0.0);
    }

    #[test]
    fn encoder_rejects_unknown_id() {
        let (encoder, _, _) = world(3);
        assert!(encoder.encode(Prompt::Class(99)).is_err());
    }

    #[test]
    fn encoder_fingerprint_is_stable() {
        let (e1, _, _) = world(3);
        let (e2, _, _) = world(3);
        let (e3, _, _) = world(4);
        assert_eq!(e1.fingerprint(), e2.fingerprint());
        assert_ne!(e1.fingerprint(), e3.fingerprint());
        assert!(e1.verify_fingerprint());
    }

    #[test]
    fn predict_noise_output_shape_and_zero_init() {
        let (encoder, schedule, net) = world(5);
        let x = Tensor::vector(vec![0.4, -0.2]);
        let c = encoder.encode(Prompt::Class(1)).unwrap();
        let out = net.predict_noise(&x, &c, 3, &schedule).unwrap();
        assert_eq!(out.shape(), x.shape());
        // zero-initialized final layer
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_noise_rejects_t_out_of_range() {
        let (encoder, schedule, net) = world(5);
        let x = Tensor::vector(vec![0.4, -0.2]);
        let c = encoder.encode(Prompt::Class(1)).unwrap();
        assert!(net.predict_noise(&x, &c, 0, &schedule).is_err());
        assert!(net.predict_noise(&x, &c, 21, &schedule).is_err());
    }

    #[test]
    fn predict_noise_gradient_wrt_condition_matches_fd() {
        let (encoder, schedule, net) = world(5);
        let net = randomized(&net, 11);
        let x = Tensor::vector(vec![0.4, -0.2]);
        let c = encoder.encode(Prompt::Class(1)).unwrap();
        let err = grad_check(
            |ps: &[Tensor]| {
                net.predict_noise(&x, &ps[0], 3, &schedule)
                    .map_err(|_| crate::TensorError::InvalidValue {
                        op: "predict_noise",
                        msg: "forward failed".into(),
                    })?
                    .square()?
                    .sum()
            },
            &[c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn adapter_is_neutral_at_init() {
        let (encoder, schedule, net) = world(6);
        let net = randomized(&net, 12);
        let mut adapted = net.clone();
        adapted.attach_adapter(1, 2, 99).unwrap();
        let x = Tensor::vector(vec![0.7, 0.1]);
        let c = encoder.encode(Prompt::Class(2)).unwrap();
        let base = net.predict_noise(&x, &c, 4, &schedule).unwrap();
        let with = adapted.predict_noise(&x, &c, 4, &schedule).unwrap();
        for (a, b) in base.data().iter().zip(with.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_param_count_and_validation() {
        let (_, _, mut net) = world(6);
        net.attach_adapter(1, 3, 0).unwrap();
        let ad = &net.adapters()[0];
        let (d, k) = net.layer_dims(1).unwrap();
        assert_eq!(ad.param_count(), 3 * (d + k));
        assert!(net.attach_adapter(1, 2, 0).is_err(), "duplicate adapter");
        let mut net2 = net.clone();
        assert!(net2.attach_adapter(0, 10_000, 0).is_err(), "rank too large");
        assert!(net2.attach_adapter(7, 2, 0).is_err(), "missing layer");
    }

    #[test]
    fn gradient_flows_to_adapter_but_not_base() {
        let (encoder, schedule, net) = world(6);
        let mut net = randomized(&net, 13);
        net.attach_adapter(1, 2, 99).unwrap();
        // move B off zero so the adapter actually influences the output
        let mut aps = net.adapter_params();
        let b = &aps[1];
        let bdata: Vec<f64> = (0..b.numel()).map(|i| 0.01 * (i as f64 + 1.0)).collect();
        aps[1] = Tensor::new(b.shape().to_vec(), bdata).unwrap();
        let net = net.with_adapter_params(&aps).unwrap();

        let tape = Tape::new();
        let adapter_leaves: Vec<Tensor> = net.adapter_params().iter().map(|p| tape.leaf(p)).collect();
        let taped = net.with_adapter_params(&adapter_leaves).unwrap();
        let x = Tensor::vector(vec![0.7, 0.1]);
        let c = encoder.encode(Prompt::Class(2)).unwrap();
        let out = taped.predict_noise(&x, &c, 4, &schedule).unwrap();
        let root = out.square().unwrap().sum().unwrap();
        let grads = tape.backward(&root).unwrap();
        // exactly the adapter leaves appear in the gradient map
        assert_eq!(grads.len(), 2);
        let ga = grads.wrt(&adapter_leaves[0]).unwrap();
        assert!(ga.data().iter().any(|&v| v != 0.0), "gradient reaches A");
        let gb = grads.wrt(&adapter_leaves[1]).unwrap();
        assert!(gb.data().iter().any(|&v| v != 0.0), "gradient reaches B");
    }

    fn toy_dataset(encoder: &ConditionEncoder, n_per_class: usize, seed: u64) -> Vec<(Prompt, Vec<f64>)> {
        let mut rng = derive_rng(seed, 0);
        let mut out = Vec::new();
        for class in 0..encoder.num_classes() {
            let center = [class as f64 - 1.5, 1.0 - class as f64 * 0.5];
            for _ in 0..n_per_class {
                let z = standard_normal(&mut rng, 2);
                out.push((
                    Prompt::Class(class),
                    vec![center[0] + 0.3 * z[0], center[1] + 0.3 * z[1]],
                ));
            }
        }
        out
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let (encoder, schedule, net) = world(8);
        let dataset = toy_dataset(&encoder, 16, 21);
        let config = PretrainConfig {
            steps: 120,
            learning_rate: 3e-3,
            batch_size: 8,
            p_drop: 0.1,
            seed: 17,
        };
        let (trained, losses) = pretrain(&net, &encoder, &schedule, &dataset, &config).unwrap();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");

        let (trained2, losses2) = pretrain(&net, &encoder, &schedule, &dataset, &config).unwrap();
        for (a, b) in losses.iter().zip(&losses2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(trained.params_hash(), trained2.params_hash());
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let (encoder, schedule, net) = world(8);
        let config = PretrainConfig {
            steps: 1,
            learning_rate: 1e-3,
            batch_size: 4,
            p_drop: 0.1,
            seed: 0,
        };
        assert!(pretrain(&net, &encoder, &schedule, &[], &config).is_err());
    }

    #[test]
    fn full_condition_dropout_makes_predictions_condition_independent() {
        let (encoder, schedule, net) = world(9);
        let dataset = toy_dataset(&encoder, 8, 22);
        let config = PretrainConfig {
            steps: 60,
            learning_rate: 3e-3,
            batch_size: 8,
            p_drop: 1.0,
            seed: 5,
        };
        let (trained, _) = pretrain(&net, &encoder, &schedule, &dataset, &config).unwrap();
        let x = Tensor::vector(vec![0.2, -0.4]);
        let uncond = trained
            .predict_noise(&x, &encoder.encode(Prompt::Null).unwrap(), 7, &schedule)
            .unwrap();
        for class in 0..encoder.num_classes() {
            let cond = trained
                .predict_noise(&x, &encoder.encode(Prompt::Class(class)).unwrap(), 7, &schedule)
                .unwrap();
            assert_eq!(cond.data(), uncond.data(), "class {class}");
        }
    }

    #[test]
    fn pretrained_net_roughly_recovers_noise_direction() {
        // sanity: after pretraining, prediction error is well below the
        // zero-predictor baseline E||eps||^2 = d_x
        let (encoder, schedule, net) = world(10);
        let dataset = toy_dataset(&encoder, 32, 23);
        let config = PretrainConfig {
            steps: 400,
            learning_rate: 3e-3,
            batch_size: 16,
            p_drop: 0.1,
            seed: 6,
        };
        let (trained, _) = pretrain(&net, &encoder, &schedule, &dataset, &config).unwrap();
        let mut rng = derive_rng(77, 0);
        let mut err_sum = 0.0;
        let n_eval = 200;
        for _ in 0..n_eval {
            let (prompt, x0) = &dataset[rng.gen_range(0..dataset.len())];
            let t = rng.gen_range(1..=schedule.steps());
            let eps = Tensor::vector(standard_normal(&mut rng, 2));
            let x_t = sampling::add_noise(&Tensor::vector(x0.clone()), &eps, t, &schedule).unwrap();
            let eps_hat = trained
                .predict_noise(&x_t, &encoder.encode(*prompt).unwrap(), t, &schedule)
                .unwrap();
            err_sum += eps_hat.sub(&eps).unwrap().square().unwrap().sum().unwrap().item();
        }
        let mse = err_sum / n_eval as f64;
        assert!(mse < 1.8, "pretraining barely helped: mse {mse}");
    }

    #[test]
    fn checkpoint_spec_round_trip_preserves_params() {
        let (_, _, mut net) = world(11);
        net.attach_adapter(0, 2, 44).unwrap();
        let spec = net.to_spec();
        let adapters = net.adapter_specs();
        let rebuilt = ScoreNetwork::from_spec(&spec, &adapters).unwrap();
        assert_eq!(net.params_hash(), rebuilt.params_hash());
        assert_eq!(rebuilt.adapters().len(), 1);
        assert_eq!(rebuilt.adapters()[0].rank, 2);
    }
}
