//! Spiking branch: leaky integrate-and-fire neurons, conv+norm units, binary
//! spike attention, and the spiking transformer block.
//!
//! Neurons follow u' = tau * u + input with a spike emitted at u' >= v_th and
//! a hard reset to zero. Spike attention multiplies binary Q, K, V directly
//! (score entries are integers bounded by the channel count) and rescales by
//! 1/sqrt(channels); there is no softmax. Convolutions carry no bias; the
//! following normalization supplies the learnable shift, using one statistics
//! bank per channel shared across steps and tokens of a sample.

use ndarray::ArrayD;

use crate::energy::Probe;
use crate::graph::{Graph, SpikeMode, Var};
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};
use crate::{CoreError, Result};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_V_TH: f64 = 1.0;
pub const NORM_EPS: f64 = 1e-5;

/// Neuron constants plus the spike nonlinearity mode. `Hard` emits binary
/// spikes; `Relaxed` substitutes the smooth ramp whose exact derivative is
/// the training surrogate, for finite-difference checks only.
#[derive(Clone, Copy, Debug)]
pub struct LifSpec {
    pub tau: f64,
    pub v_th: f64,
    pub mode: SpikeMode,
}

impl Default for LifSpec {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, v_th: DEFAULT_V_TH, mode: SpikeMode::Hard }
    }
}

/// One functional neuron update over a tensor of membranes: returns
/// (spikes, next_state). `state` holds post-reset potentials from the
/// previous step.
pub fn lif_step(
    state: &ArrayD<f64>,
    input: &ArrayD<f64>,
    tau: f64,
    v_th: f64,
) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    if state.shape() != input.shape() {
        return Err(CoreError::InvalidArgument(format!(
            "state shape {:?} does not match input shape {:?}",
            state.shape(),
            input.shape()
        )));
    }
    let u = state.mapv(|s| tau * s) + input;
    let spikes = u.mapv(|v| if v >= v_th { 1.0 } else { 0.0 });
    let next = &u * &spikes.mapv(|s| 1.0 - s);
    Ok((spikes, next))
}

/// Errors unless every entry is exactly 0 or 1.
pub fn ensure_binary(name: &str, v: &ArrayD<f64>) -> Result<()> {
    if let Some(bad) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(CoreError::InvariantViolation(format!(
            "{name} must be binary, found {bad}"
        )));
    }
    Ok(())
}

fn spike_density(v: &ArrayD<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|&&x| x != 0.0).count() as f64 / v.len() as f64
    }
}

/// Token-axis convolution (no bias) followed by per-channel normalization
/// with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub kernel: usize,
}

pub fn new_conv_bn(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut impl rand::Rng,
) -> ConvBn {
    assert!(kernel % 2 == 1, "kernel must be odd for same padding");
    let w = store.add(
        format!("{name}.w"),
        group,
        trunc_normal(&[c_out, c_in, kernel], 0.02, rng),
    );
    let gamma = store.add(
        format!("{name}.gamma"),
        group,
        ArrayD::from_elem(ndarray::IxDyn(&[c_out]), 1.0),
    );
    let beta = store.add(
        format!("{name}.beta"),
        group,
        ArrayD::zeros(ndarray::IxDyn(&[c_out])),
    );
    ConvBn { w, gamma, beta, kernel }
}

pub fn conv_bn_forward(g: &mut Graph, store: &ParamStore, cb: &ConvBn, x: Var) -> Var {
    let w = g.param(store, cb.w);
    let h = g.conv1d(w, x);
    let gamma = g.param(store, cb.gamma);
    let beta = g.param(store, cb.beta);
    g.channel_norm(h, gamma, beta, NORM_EPS)
}

/// Patch projection shared between template and search inputs; each input
/// gets its own neuron bank by running the scan separately.
#[derive(Clone, Debug)]
pub struct SpikingTokenizer {
    pub proj: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub patch: usize,
}

pub fn new_spiking_tokenizer(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    dim: usize,
    patch: usize,
    rng: &mut impl rand::Rng,
) -> SpikingTokenizer {
    let proj = store.add(
        format!("{name}.proj"),
        ParamGroup::SnnBackbone,
        trunc_normal(&[dim, c_in * patch * patch], 0.02, rng),
    );
    let gamma = store.add(
        format!("{name}.gamma"),
        ParamGroup::SnnBackbone,
        ArrayD::from_elem(ndarray::IxDyn(&[dim]), 1.0),
    );
    let beta = store.add(
        format!("{name}.beta"),
        ParamGroup::SnnBackbone,
        ArrayD::zeros(ndarray::IxDyn(&[dim])),
    );
    SpikingTokenizer { proj, gamma, beta, patch }
}

/// (T, C, H, W) event frames to (T, dim, tokens) spike trains.
pub fn tokenize_spiking(
    g: &mut Graph,
    store: &ParamStore,
    tok: &SpikingTokenizer,
    x: Var,
    lif: LifSpec,
    scope: &str,
    probe: &mut Probe,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(CoreError::InvalidArgument(format!(
            "tokenizer expects (T, C, H, W), got {shape:?}"
        )));
    }
    if shape[2] % tok.patch != 0 || shape[3] % tok.patch != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "input {}x{} not divisible by patch {}",
            shape[2], shape[3], tok.patch
        )));
    }
    let w = g.param(store, tok.proj);
    let e = g.patch_embed(w, x, tok.patch);
    let gamma = g.param(store, tok.gamma);
    let beta = g.param(store, tok.beta);
    let n = g.channel_norm(e, gamma, beta, NORM_EPS);
    let s = g.lif(n, lif.tau, lif.v_th, lif.mode);
    probe.rate(format!("{scope}.lif"), spike_density(g.value(s)));
    probe.tensor(format!("{scope}.spikes"), s);
    Ok(s)
}

/// Spike self-attention: shared input neurons, per-Q/K/V conv+norm+neuron
/// stacks, integer score matrix from binary Q^T K, V-weighted readout scaled
/// by 1/sqrt(channels), and an output conv+norm.
#[derive(Clone, Debug)]
pub struct SpikeMsa {
    pub q: ConvBn,
    pub k: ConvBn,
    pub v: ConvBn,
    pub o: ConvBn,
}

pub fn new_spike_msa(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    rng: &mut impl rand::Rng,
) -> SpikeMsa {
    SpikeMsa {
        q: new_conv_bn(store, &format!("{name}.q"), ParamGroup::SnnBackbone, dim, dim, 1, rng),
        k: new_conv_bn(store, &format!("{name}.k"), ParamGroup::SnnBackbone, dim, dim, 1, rng),
        v: new_conv_bn(store, &format!("{name}.v"), ParamGroup::SnnBackbone, dim, dim, 1, rng),
        o: new_conv_bn(store, &format!("{name}.o"), ParamGroup::SnnBackbone, dim, dim, 1, rng),
    }
}

pub fn spike_msa_forward(
    g: &mut Graph,
    store: &ParamStore,
    msa: &SpikeMsa,
    x: Var,
    lif: LifSpec,
    scope: &str,
    probe: &mut Probe,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "spike attention expects (T, M, N), got {shape:?}"
        )));
    }
    let (t, m, n) = (shape[0], shape[1], shape[2]);
    let xs = g.lif(x, lif.tau, lif.v_th, lif.mode);
    probe.rate(format!("{scope}.in_lif"), spike_density(g.value(xs)));
    let branch = |g: &mut Graph, cb: &ConvBn, tag: &str, probe: &mut Probe| -> Result<Var> {
        let pre = conv_bn_forward(g, store, cb, xs);
        let s = g.lif(pre, lif.tau, lif.v_th, lif.mode);
        if matches!(lif.mode, SpikeMode::Hard) {
            ensure_binary(&format!("{scope}.{tag}"), g.value(s))?;
        }
        probe.rate(format!("{scope}.{tag}"), spike_density(g.value(s)));
        probe.tensor(format!("{scope}.{tag}.spikes"), s);
        Ok(s)
    };
    let qs = branch(g, &msa.q, "q", probe)?;
    let ks = branch(g, &msa.k, "k", probe)?;
    let vs = branch(g, &msa.v, "v", probe)?;
    let scores = g.gram(qs, ks);
    probe.tensor(format!("{scope}.scores"), scores);
    // score accumulation fires once per coincident Q/K spike pair
    let score_sum: f64 = g.value(scores).iter().sum();
    probe.rate(
        format!("{scope}.qk"),
        score_sum / (t * m * n * n) as f64,
    );
    probe.rate(format!("{scope}.sv"), spike_density(g.value(vs)));
    let att = g.attn_out(vs, scores);
    let att = g.scale(att, 1.0 / (m as f64).sqrt());
    probe.tensor(format!("{scope}.attn"), att);
    Ok(conv_bn_forward(g, store, &msa.o, att))
}

/// Two neuron-gated conv+norm stages over the token axis.
#[derive(Clone, Debug)]
pub struct SpikeMlp {
    pub fc1: ConvBn,
    pub fc2: ConvBn,
}

pub fn new_spike_mlp(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    hidden: usize,
    kernel: usize,
    rng: &mut impl rand::Rng,
) -> SpikeMlp {
    SpikeMlp {
        fc1: new_conv_bn(store, &format!("{name}.fc1"), ParamGroup::SnnBackbone, dim, hidden, kernel, rng),
        fc2: new_conv_bn(store, &format!("{name}.fc2"), ParamGroup::SnnBackbone, hidden, dim, kernel, rng),
    }
}

pub fn spike_mlp_forward(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &SpikeMlp,
    x: Var,
    lif: LifSpec,
    scope: &str,
    probe: &mut Probe,
) -> Var {
    let s1 = g.lif(x, lif.tau, lif.v_th, lif.mode);
    probe.rate(format!("{scope}.fc1"), spike_density(g.value(s1)));
    let h = conv_bn_forward(g, store, &mlp.fc1, s1);
    let s2 = g.lif(h, lif.tau, lif.v_th, lif.mode);
    probe.rate(format!("{scope}.fc2"), spike_density(g.value(s2)));
    conv_bn_forward(g, store, &mlp.fc2, s2)
}

/// Residual spiking transformer block: x + MSA(x), then + MLP(.).
#[derive(Clone, Debug)]
pub struct SpikeBlock {
    pub msa: SpikeMsa,
    pub mlp: SpikeMlp,
}

pub fn new_spike_block(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    hidden: usize,
    mlp_kernel: usize,
    rng: &mut impl rand::Rng,
) -> SpikeBlock {
    SpikeBlock {
        msa: new_spike_msa(store, &format!("{name}.msa"), dim, rng),
        mlp: new_spike_mlp(store, &format!("{name}.mlp"), dim, hidden, mlp_kernel, rng),
    }
}

pub fn spike_block_forward(
    g: &mut Graph,
    store: &ParamStore,
    blk: &SpikeBlock,
    x: Var,
    lif: LifSpec,
    scope: &str,
    probe: &mut Probe,
) -> Result<Var> {
    let att = spike_msa_forward(g, store, &blk.msa, x, lif, &format!("{scope}.msa"), probe)?;
    let x1 = g.add(x, att);
    let ff = spike_mlp_forward(g, store, &blk.mlp, x1, lif, &format!("{scope}.mlp"), probe);
    Ok(g.add(x1, ff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    }

    #[test]
    fn step_fires_and_resets() {
        let u0 = Array1::<f64>::zeros(1).into_dyn();
        let inp = Array1::from_elem(1, 2.0).into_dyn();
        let (s, u1) = lif_step(&u0, &inp, 0.5, 1.0).unwrap();
        assert_eq!(s[[0]], 1.0);
        assert_eq!(u1[[0]], 0.0);
    }

    #[test]
    fn subthreshold_input_accumulates_until_spike() {
        let mut u = Array1::<f64>::zeros(1).into_dyn();
        let inp = Array1::from_elem(1, 0.4).into_dyn();
        let mut spike_steps = Vec::new();
        for step in 0..6 {
            let (s, next) = lif_step(&u, &inp, 1.0, 1.0).unwrap();
            if s[[0] ] == 1.0 {
                spike_steps.push(step);
            }
            u = next;
        }
        assert_eq!(spike_steps, vec![2, 5]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let u = Array1::<f64>::zeros(2).into_dyn();
        let inp = Array1::<f64>::zeros(3).into_dyn();
        assert!(lif_step(&u, &inp, 0.5, 1.0).is_err());
    }

    #[test]
    fn graph_scan_matches_functional_steps() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[5, 3, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.lif(xv, 0.5, 1.0, SpikeMode::Hard);
        let got = g.value(s);
        let mut u = ndarray::Array2::<f64>::zeros((3, 4)).into_dyn();
        for t in 0..5 {
            let inp = x.index_axis(ndarray::Axis(0), t).to_owned();
            let (sp, next) = lif_step(&u, &inp, 0.5, 1.0).unwrap();
            u = next;
            let got_t = got.index_axis(ndarray::Axis(0), t);
            for (a, b) in got_t.iter().zip(sp.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn attention_spikes_are_binary_and_scores_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let msa = new_spike_msa(&mut store, "msa", 6, &mut rng);
        // large weights so spikes actually fire
        for cb in [&msa.q, &msa.k, &msa.v] {
            store.value_mut(cb.w).mapv_inplace(|v| v * 40.0);
        }
        for seed in 0..3u64 {
            let mut r2 = ChaCha12Rng::seed_from_u64(100 + seed);
            let x = randn(&mut r2, &[3, 6, 5]).mapv(|v| v * 2.0);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut probe = Probe::on();
            spike_msa_forward(&mut g, &store, &msa, xv, LifSpec::default(), "msa", &mut probe)
                .unwrap();
            for tag in ["q", "k", "v"] {
                let t = probe.find_tensor(&format!("msa.{tag}.spikes")).unwrap();
                ensure_binary(tag, g.value(t)).unwrap();
            }
            let scores = probe.find_tensor("msa.scores").unwrap();
            for &s in g.value(scores).iter() {
                assert_eq!(s, s.round(), "score {s} not integral");
                assert!((0.0..=6.0).contains(&s), "score {s} out of range");
            }
            let fired: f64 = probe.find_rate("msa.q").unwrap();
            assert!(fired > 0.0, "test should exercise nonzero activity");
        }
    }

    #[test]
    fn zero_input_stays_silent() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let blk = new_spike_block(&mut store, "b", 6, 12, 1, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Array3::<f64>::zeros((3, 6, 5)).into_dyn());
        let mut probe = Probe::on();
        let out =
            spike_block_forward(&mut g, &store, &blk, x, LifSpec::default(), "b", &mut probe)
                .unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
        for (name, r) in probe.rates() {
            assert_eq!(*r, 0.0, "unexpected activity in {name}");
        }
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let blk = new_spike_block(&mut store, "b", 6, 12, 1, &mut rng);
        for cb in [&blk.msa.q, &blk.msa.k, &blk.msa.v, &blk.msa.o, &blk.mlp.fc1, &blk.mlp.fc2] {
            store.value_mut(cb.w).fill(0.0);
        }
        let x_arr = randn(&mut rng, &[2, 6, 4]);
        let mut g = Graph::new();
        let x = g.constant(x_arr.clone());
        let mut probe = Probe::off();
        let out =
            spike_block_forward(&mut g, &store, &blk, x, LifSpec::default(), "b", &mut probe)
                .unwrap();
        assert_eq!(g.value(out), &x_arr);
    }

    #[test]
    fn single_token_attention_reduces_to_scaled_coincidence() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let msa = new_spike_msa(&mut store, "msa", 4, &mut rng);
        for cb in [&msa.q, &msa.k, &msa.v] {
            store.value_mut(cb.w).mapv_inplace(|v| v * 60.0);
        }
        let x = randn(&mut rng, &[2, 4, 1]).mapv(|v| v * 3.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut probe = Probe::on();
        spike_msa_forward(&mut g, &store, &msa, xv, LifSpec::default(), "msa", &mut probe)
            .unwrap();
        let q = g.value(probe.find_tensor("msa.q.spikes").unwrap()).clone();
        let k = g.value(probe.find_tensor("msa.k.spikes").unwrap()).clone();
        let v = g.value(probe.find_tensor("msa.v.spikes").unwrap()).clone();
        let att = g.value(probe.find_tensor("msa.attn").unwrap()).clone();
        for t in 0..2 {
            let coincidence: f64 = (0..4).map(|m| q[[t, m, 0]] * k[[t, m, 0]]).sum();
            for m in 0..4 {
                let want = v[[t, m, 0]] * coincidence / 2.0;
                assert!((att[[t, m, 0]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokenizer_shares_weights_across_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let tok = new_spiking_tokenizer(&mut store, "tok", 3, 8, 4, &mut rng);
        let x_arr = randn(&mut rng, &[2, 3, 8, 8]);
        let mut g = Graph::new();
        let a = g.constant(x_arr.clone());
        let b = g.constant(x_arr);
        let mut probe = Probe::off();
        let lif = LifSpec::default();
        let ta = tokenize_spiking(&mut g, &store, &tok, a, lif, "tpl", &mut probe).unwrap();
        let tb = tokenize_spiking(&mut g, &store, &tok, b, lif, "srch", &mut probe).unwrap();
        assert_eq!(g.value(ta), g.value(tb));
        assert_eq!(g.value(ta).shape(), &[2, 8, 4]);
    }

    #[test]
    fn tokenizer_validates_shape() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let tok = new_spiking_tokenizer(&mut store, "tok", 3, 8, 4, &mut rng);
        let mut g = Graph::new();
        let bad = g.constant(Array4::<f64>::zeros((2, 3, 9, 8)).into_dyn());
        let mut probe = Probe::off();
        assert!(tokenize_spiking(&mut g, &store, &tok, bad, LifSpec::default(), "t", &mut probe)
            .is_err());
    }
}
