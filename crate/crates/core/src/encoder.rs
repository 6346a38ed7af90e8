//! Per-BS residual autoencoder over the frequency axis.
//!
//! The encoder maps the conditioned CSI features to one latent token per
//! subcarrier: a 1×1 input projection lifts the 2·T·N_r per-subcarrier
//! features to a working width, residual blocks (two width-3 convolutions
//! along frequency with ReLU and an additive shortcut each) mix neighboring
//! subcarriers, and a 1×1 output projection emits d_z channels. The decoder
//! mirrors the structure back to the feature layout. The reconstruction
//! objective is the negative normalized Hermitian correlation between the
//! conditioned CSI and its reconstruction — invariant to any global complex
//! scale, which the fronthaul never carries.
//!
//! All forward passes run on the autodiff graph; convolutions are composed
//! from row shifts and dense per-tap projections, so every gradient flows
//! through already-verified primitives.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, Bound, Graph, GraphError, NodeId, ParamSet, Tensor};
use crate::channel::CsiTensor;
use crate::preprocess::{reshape_flatten, stack_complex, FeatureTensor, PreprocessedCsi};

/// Keeps the correlation denominator positive for all-zero reconstructions.
pub const EPS_COS: f64 = 1e-8;

/// Shape of the per-BS autoencoder. `input_channels` must equal 2·T·N_r.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    /// Working channel width inside the residual trunk.
    pub width: usize,
    /// Residual block count.
    pub blocks: usize,
    /// Latent channels per subcarrier (d_z).
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn new(slots: usize, antennas: usize, width: usize, blocks: usize, latent_dim: usize) -> Self {
        Self { input_channels: 2 * slots * antennas, width, blocks, latent_dim }
    }

    /// Latent vector length for a given subcarrier count: D = N_sc·d_z.
    pub fn latent_len(&self, subcarriers: usize) -> usize {
        subcarriers * self.latent_dim
    }
}

/// Features as a matrix with one row per subcarrier and the complex parts
/// interleaved per flattened (slot, antenna) row: F[n, 2r+c] = X[r, n, c].
pub fn feature_matrix(x: &FeatureTensor) -> Tensor {
    let (rows, subcarriers, _) = x.dim();
    let mut data = vec![0.0; subcarriers * 2 * rows];
    for n in 0..subcarriers {
        for r in 0..rows {
            data[n * 2 * rows + 2 * r] = x[[r, n, 0]];
            data[n * 2 * rows + 2 * r + 1] = x[[r, n, 1]];
        }
    }
    Tensor::matrix(subcarriers, 2 * rows, data).expect("constructed consistently")
}

/// Inverse of [`feature_matrix`].
pub fn matrix_features(m: &Tensor) -> FeatureTensor {
    let shape = m.shape();
    let (subcarriers, cols) = (shape[0], shape[1]);
    let rows = cols / 2;
    let mut x = FeatureTensor::zeros((rows, subcarriers, 2));
    for n in 0..subcarriers {
        for r in 0..rows {
            x[[r, n, 0]] = m.get(n, 2 * r);
            x[[r, n, 1]] = m.get(n, 2 * r + 1);
        }
    }
    x
}

/// The feature-matrix layout of a complex CSI tensor — the target the
/// decoder output is compared against.
pub fn complex_layout(h: &CsiTensor) -> Tensor {
    feature_matrix(&reshape_flatten(&stack_complex(h)))
}

fn tap(prefix: &str, part: &str) -> String {
    format!("{prefix}.{part}")
}

fn glorot_into<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    name: String,
    rows: usize,
    cols: usize,
) -> Result<(), GraphError> {
    params.insert(&name, glorot_uniform(rng, rows, cols))
}

/// Initializes one direction of the autoencoder under `prefix`
/// (weights Glorot-uniform, biases zero). The encoder uses
/// (in: input_channels→width, out: width→latent_dim); pass `mirror = true`
/// for the decoder to swap the endpoints.
pub fn init_network<R: Rng>(
    cfg: &EncoderConfig,
    prefix: &str,
    mirror: bool,
    rng: &mut R,
) -> Result<ParamSet, GraphError> {
    let (d_in, d_out) = if mirror {
        (cfg.latent_dim, cfg.input_channels)
    } else {
        (cfg.input_channels, cfg.latent_dim)
    };
    let mut p = ParamSet::new();
    glorot_into(&mut p, rng, tap(prefix, "in.w"), d_in, cfg.width)?;
    p.insert(&tap(prefix, "in.b"), Tensor::row(vec![0.0; cfg.width]))?;
    for b in 0..cfg.blocks {
        for c in 0..2 {
            let base = format!("{prefix}.block{b}.c{c}");
            glorot_into(&mut p, rng, tap(&base, "wp"), cfg.width, cfg.width)?;
            glorot_into(&mut p, rng, tap(&base, "wc"), cfg.width, cfg.width)?;
            glorot_into(&mut p, rng, tap(&base, "wn"), cfg.width, cfg.width)?;
            p.insert(&tap(&base, "b"), Tensor::row(vec![0.0; cfg.width]))?;
        }
    }
    glorot_into(&mut p, rng, tap(prefix, "out.w"), cfg.width, d_out)?;
    p.insert(&tap(prefix, "out.b"), Tensor::row(vec![0.0; d_out]))?;
    Ok(p)
}

/// Width-3 same-padded convolution along the row (frequency) axis,
/// expressed as shifted copies with dense per-tap projections:
/// out[n] = x[n−1]·W_p + x[n]·W_c + x[n+1]·W_n + b, zero-padded at the ends.
fn conv3(
    g: &mut Graph,
    bound: &Bound,
    base: &str,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let shape = g.value(x).shape().to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let zero_row = g.constant(Tensor::zeros(vec![1, cols]));
    let (prev, next) = if rows == 1 {
        (zero_row, zero_row)
    } else {
        let head = g.slice_rows(x, 0, rows - 1)?;
        let tail = g.slice_rows(x, 1, rows - 1)?;
        let prev = g.concat_rows(&[zero_row, head])?;
        let next = g.concat_rows(&[tail, zero_row])?;
        (prev, next)
    };
    let wp = bound.id(&tap(base, "wp"))?;
    let wc = bound.id(&tap(base, "wc"))?;
    let wn = bound.id(&tap(base, "wn"))?;
    let b = bound.id(&tap(base, "b"))?;
    let a = g.matmul(prev, wp)?;
    let c = g.matmul(x, wc)?;
    let d = g.matmul(next, wn)?;
    let ac = g.add(a, c)?;
    let acd = g.add(ac, d)?;
    g.add_bias(acd, b)
}

/// Residual trunk shared by encoder and decoder: input projection with
/// ReLU, `blocks` residual blocks, linear output projection.
fn network_graph(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    cfg: &EncoderConfig,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let w_in = bound.id(&tap(prefix, "in.w"))?;
    let b_in = bound.id(&tap(prefix, "in.b"))?;
    let lifted = g.matmul(x, w_in)?;
    let biased = g.add_bias(lifted, b_in)?;
    let mut h = g.relu(biased)?;
    for blk in 0..cfg.blocks {
        let base0 = format!("{prefix}.block{blk}.c0");
        let base1 = format!("{prefix}.block{blk}.c1");
        let c0 = conv3(g, bound, &base0, h)?;
        let r0 = g.relu(c0)?;
        let c1 = conv3(g, bound, &base1, r0)?;
        let shortcut = g.add(h, c1)?;
        h = g.relu(shortcut)?;
    }
    let w_out = bound.id(&tap(prefix, "out.w"))?;
    let b_out = bound.id(&tap(prefix, "out.b"))?;
    let projected = g.matmul(h, w_out)?;
    g.add_bias(projected, b_out)
}

/// Encoder forward on the graph: features (N_sc, 2·T·N_r) → latent tokens
/// (N_sc, d_z), one row per subcarrier.
pub fn encode_graph(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    cfg: &EncoderConfig,
    x: NodeId,
) -> Result<NodeId, GraphError> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_channels {
        return Err(GraphError::Shape {
            op: "encode",
            detail: format!(
                "expected (N_sc, {}) features, got {:?}",
                cfg.input_channels, shape
            ),
        });
    }
    network_graph(g, bound, prefix, cfg, x)
}

/// Decoder forward on the graph: latent tokens (N_sc, d_z) → reconstructed
/// features (N_sc, 2·T·N_r).
pub fn decode_graph(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    cfg: &EncoderConfig,
    z: NodeId,
) -> Result<NodeId, GraphError> {
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.latent_dim {
        return Err(GraphError::Shape {
            op: "decode",
            detail: format!("expected (N_sc, {}) latent, got {:?}", cfg.latent_dim, shape),
        });
    }
    network_graph(g, bound, prefix, cfg, z)
}

/// Plain (non-training) encoder evaluation.
pub fn run_encoder(
    params: &ParamSet,
    cfg: &EncoderConfig,
    prefix: &str,
    features: &FeatureTensor,
) -> Result<Tensor, GraphError> {
    let mut g = Graph::new();
    let bound = g.bind_filtered(params, |n| n.starts_with(prefix))?;
    let x = g.constant(feature_matrix(features));
    let z = encode_graph(&mut g, &bound, prefix, cfg, x)?;
    Ok(g.value(z).clone())
}

/// Frequency-ordered vectorization: token rows concatenated in subcarrier
/// order. The latent matrix is stored row-major, so this is its flat data.
pub fn vectorize_tokens(z: &Tensor) -> Vec<f64> {
    z.data().to_vec()
}

/// Inverse of [`vectorize_tokens`].
pub fn tokens_from_vec(v: &[f64], subcarriers: usize, latent_dim: usize) -> Result<Tensor, GraphError> {
    Tensor::matrix(subcarriers, latent_dim, v.to_vec())
}

/// Negative normalized Hermitian correlation −|⟨h, ĥ⟩| / (‖h‖·‖ĥ‖ + ε).
/// Lies in (−1, 0]; −1 means perfect reconstruction up to a global complex
/// scale.
pub fn cosine_loss(h: &CsiTensor, h_hat: &CsiTensor, eps: f64) -> f64 {
    let ip: Complex64 = h.iter().zip(h_hat.iter()).map(|(a, b)| a.conj() * b).sum();
    let nh = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let nb = h_hat.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    -ip.norm() / (nh * nb + eps)
}

/// Graph form of [`cosine_loss`] against a fixed target. The Hermitian
/// inner product of the complex tensors is assembled from two full
/// elementwise sums over the real layout: ⟨h,·⟩'s real part pairs the
/// target layout with the reconstruction, and its imaginary part pairs the
/// layout of j·h with the reconstruction.
pub fn cosine_loss_graph(
    g: &mut Graph,
    target: &CsiTensor,
    recon: NodeId,
    eps: f64,
) -> Result<NodeId, GraphError> {
    let rotated = target.mapv(|v| v * Complex64::new(0.0, 1.0));
    let a = g.constant(complex_layout(target));
    let ja = g.constant(complex_layout(&rotated));
    let re = {
        let m = g.mul(a, recon)?;
        g.sum(m)?
    };
    let im = {
        let m = g.mul(ja, recon)?;
        g.sum(m)?
    };
    let re2 = g.mul(re, re)?;
    let im2 = g.mul(im, im)?;
    let ip_sq = g.add(re2, im2)?;
    let ip_abs = g.sqrt(ip_sq)?;
    let r2 = g.mul(recon, recon)?;
    let r_sum = g.sum(r2)?;
    let r_norm = g.sqrt(r_sum)?;
    let h_norm: f64 = target.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let prod = g.scale(r_norm, h_norm)?;
    let eps_node = g.constant(Tensor::scalar(eps));
    let denom = g.add(prod, eps_node)?;
    let ratio = g.div(ip_abs, denom)?;
    g.neg(ratio)
}

/// One sample's reconstruction loss: encode, decode, compare against the
/// conditioned CSI. The bottleneck stays continuous — no quantizer here.
pub fn reconstruction_loss_graph(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    enc_prefix: &str,
    dec_prefix: &str,
    sample: &PreprocessedCsi,
) -> Result<NodeId, GraphError> {
    let x = g.constant(feature_matrix(&sample.features));
    let z = encode_graph(g, bound, enc_prefix, cfg, x)?;
    let recon = decode_graph(g, bound, dec_prefix, cfg, z)?;
    cosine_loss_graph(g, &sample.stabilized, recon, EPS_COS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::preprocess;
    use crate::seeds::{rng_from, standard_normal};
    use ndarray::Array3;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { input_channels: 4, width: 3, blocks: 1, latent_dim: 2 }
    }

    fn random_features(rows: usize, subcarriers: usize, seed: u64) -> FeatureTensor {
        let mut rng = rng_from(seed);
        FeatureTensor::from_shape_fn((rows, subcarriers, 2), |_| standard_normal(&mut rng))
    }

    fn random_csi(t: usize, m: usize, n: usize, seed: u64) -> CsiTensor {
        let mut rng = rng_from(seed);
        Array3::from_shape_fn((t, m, n), |_| {
            Complex64::new(standard_normal(&mut rng), standard_normal(&mut rng))
        })
    }

    #[test]
    fn feature_matrix_layout_and_inverse() {
        let x = random_features(3, 4, 1);
        let m = feature_matrix(&x);
        assert_eq!(m.shape(), &[4, 6]);
        // F[n, 2r+c] = X[r, n, c] spot checks.
        assert_eq!(m.get(2, 0), x[[0, 2, 0]]);
        assert_eq!(m.get(2, 1), x[[0, 2, 1]]);
        assert_eq!(m.get(1, 4), x[[2, 1, 0]]);
        assert_eq!(matrix_features(&m), x);
    }

    #[test]
    fn encoder_output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(2);
        let params = init_network(&cfg, "enc", false, &mut rng).unwrap();
        let x = random_features(2, 5, 3);
        let z1 = run_encoder(&params, &cfg, "enc", &x).unwrap();
        let z2 = run_encoder(&params, &cfg, "enc", &x).unwrap();
        assert_eq!(z1.shape(), &[5, 2]);
        assert_eq!(z1.data(), z2.data());
    }

    #[test]
    fn zero_weights_make_the_latent_input_independent() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(4);
        let mut params = init_network(&cfg, "enc", false, &mut rng).unwrap();
        for name in params.names().map(String::from).collect::<Vec<_>>() {
            if name.ends_with(".w") || name.contains(".w") && !name.ends_with(".b") {
                let t = params.get(&name).unwrap().clone();
                let zeroed = Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).unwrap();
                params.set(&name, zeroed).unwrap();
            }
        }
        // Give the output bias a recognizable pattern.
        params.set("enc.out.b", Tensor::row(vec![0.25, -1.5])).unwrap();
        let za = run_encoder(&params, &cfg, "enc", &random_features(2, 5, 5)).unwrap();
        let zb = run_encoder(&params, &cfg, "enc", &random_features(2, 5, 6)).unwrap();
        assert_eq!(za.data(), zb.data());
        for n in 0..5 {
            assert_eq!(za.get(n, 0), 0.25);
            assert_eq!(za.get(n, 1), -1.5);
        }
    }

    #[test]
    fn conv_matches_brute_force_sliding_window() {
        let cfg = EncoderConfig { input_channels: 3, width: 3, blocks: 1, latent_dim: 2 };
        let mut rng = rng_from(7);
        let params = init_network(&cfg, "enc", false, &mut rng).unwrap();
        let rows = 6;
        let x_data: Vec<f64> = (0..rows * 3).map(|_| standard_normal(&mut rng)).collect();
        let x = Tensor::matrix(rows, 3, x_data.clone()).unwrap();

        let mut g = Graph::new();
        let bound = g.bind(&params).unwrap();
        let xn = g.constant(x);
        let out = conv3(&mut g, &bound, "enc.block0.c0", xn).unwrap();
        let got = g.value(out).clone();

        let wp = params.get("enc.block0.c0.wp").unwrap();
        let wc = params.get("enc.block0.c0.wc").unwrap();
        let wn = params.get("enc.block0.c0.wn").unwrap();
        let b = params.get("enc.block0.c0.b").unwrap();
        for n in 0..rows {
            for j in 0..3 {
                let mut acc = b.get(0, j);
                for i in 0..3 {
                    if n > 0 {
                        acc += x_data[(n - 1) * 3 + i] * wp.get(i, j);
                    }
                    acc += x_data[n * 3 + i] * wc.get(i, j);
                    if n + 1 < rows {
                        acc += x_data[(n + 1) * 3 + i] * wn.get(i, j);
                    }
                }
                assert!((got.get(n, j) - acc).abs() < 1e-12, "({n},{j})");
            }
        }
    }

    #[test]
    fn single_subcarrier_conv_degenerates_to_center_tap() {
        let cfg = EncoderConfig { input_channels: 2, width: 2, blocks: 1, latent_dim: 1 };
        let mut rng = rng_from(8);
        let params = init_network(&cfg, "enc", false, &mut rng).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let mut g = Graph::new();
        let bound = g.bind(&params).unwrap();
        let xn = g.constant(x);
        let out = conv3(&mut g, &bound, "enc.block0.c0", xn).unwrap();
        let wc = params.get("enc.block0.c0.wc").unwrap();
        let b = params.get("enc.block0.c0.b").unwrap();
        for j in 0..2 {
            let expect = 0.3 * wc.get(0, j) - 0.7 * wc.get(1, j) + b.get(0, j);
            assert!((g.value(out).get(0, j) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn vectorization_is_subcarrier_major() {
        let z = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(vectorize_tokens(&z), vec![1.0, 2.0, 3.0, 4.0]);
        let back = tokens_from_vec(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(back.data(), z.data());
    }

    #[test]
    fn cosine_loss_recognizes_perfect_and_orthogonal() {
        let h = random_csi(2, 2, 3, 11);
        let same = cosine_loss(&h, &h, EPS_COS);
        assert!((-1.0..=-0.999999).contains(&same), "self loss {same}");

        // Orthogonal: put all energy in disjoint entries.
        let mut a = Array3::<Complex64>::zeros((1, 1, 2));
        let mut b = Array3::<Complex64>::zeros((1, 1, 2));
        a[[0, 0, 0]] = Complex64::new(1.0, 0.0);
        b[[0, 0, 1]] = Complex64::new(0.0, 2.0);
        assert_eq!(cosine_loss(&a, &b, EPS_COS), 0.0);
    }

    #[test]
    fn cosine_loss_is_scale_and_phase_invariant() {
        let h = random_csi(2, 2, 4, 12);
        let h_hat = random_csi(2, 2, 4, 13);
        let base = cosine_loss(&h, &h_hat, EPS_COS);
        // Scales of moderate magnitude: the ε in the denominator bounds how
        // far invariance can hold when ‖ĥ‖ is shrunk toward zero.
        for c in [
            Complex64::new(3.7, 0.0),
            Complex64::from_polar(1.0, 2.4),
            Complex64::from_polar(0.5, -1.1),
        ] {
            let scaled = h_hat.mapv(|v| v * c);
            let loss = cosine_loss(&h, &scaled, EPS_COS);
            assert!((loss - base).abs() < 1e-9, "c={c}: {loss} vs {base}");
        }
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let h = random_csi(2, 2, 4, 14);
        let h_hat = random_csi(2, 2, 4, 15);
        let mut g = Graph::new();
        let recon = g.constant(complex_layout(&h_hat));
        let loss = cosine_loss_graph(&mut g, &h, recon, EPS_COS).unwrap();
        let expect = cosine_loss(&h, &h_hat, EPS_COS);
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(16);
        let mut params = init_network(&cfg, "enc", false, &mut rng).unwrap();
        params.absorb(init_network(&cfg, "dec", true, &mut rng).unwrap()).unwrap();
        let h = random_csi(1, 2, 3, 17);
        let sample = preprocess(&h);
        let report = crate::autodiff::gradcheck(&params, 1e-5, |g, bound| {
            reconstruction_loss_graph(g, bound, &cfg, "enc", "dec", &sample)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn reconstruction_loss_improves_with_one_adam_epoch() {
        // Not a learning benchmark — just that gradients point downhill.
        let cfg = EncoderConfig { input_channels: 8, width: 8, blocks: 1, latent_dim: 3 };
        let mut rng = rng_from(18);
        let mut params = init_network(&cfg, "enc", false, &mut rng).unwrap();
        params.absorb(init_network(&cfg, "dec", true, &mut rng).unwrap()).unwrap();
        let h = random_csi(2, 2, 6, 19);
        let sample = preprocess(&h);
        let adam = crate::autodiff::AdamConfig::with_learning_rate(1e-2);
        let loss_at = |p: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let bound = g.bind(p).unwrap();
            let l = reconstruction_loss_graph(&mut g, &bound, &cfg, "enc", "dec", &sample)
                .unwrap();
            g.value(l).item().unwrap()
        };
        let initial = loss_at(&params);
        for _ in 0..25 {
            let mut g = Graph::new();
            let bound = g.bind(&params).unwrap();
            let l = reconstruction_loss_graph(&mut g, &bound, &cfg, "enc", "dec", &sample)
                .unwrap();
            g.backward(l).unwrap();
            params.adam_step(&g.param_grads(), &adam, |_| true).unwrap();
        }
        let trained = loss_at(&params);
        assert!(trained < initial, "loss went {initial} -> {trained}");
    }
}
