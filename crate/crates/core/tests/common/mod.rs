//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uxmil::model::{Modality, ModelConfig, ModelInput, UxModel};
use uxmil::nn::{MultiHeadAttention, PositionalEncoding, TransformerEncoder, TransformerEncoderConfig};
use uxmil::{Graph, ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn matmul_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
    let a = uniform(&mut r, &[m, k], 1.0);
    let b = uniform(&mut r, &[k, n], 1.0);
    let mut g = Graph::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    max_diff(g.value(c).data(), &matmul_oracle(a.data(), b.data(), m, k, n))
}

/// Direct cross-correlation over `[n, c_in, h, w]` with zero padding.
pub fn conv_oracle(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * co * oh * ow);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = bias[o];
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.at(&[b, c, iy as usize, ix as usize]) * k.at(&[o, c, dy, dx]);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

pub fn conv_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, ci, co) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
    let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
    let stride = r.gen_range(1..3);
    let pad = r.gen_range(0..2);
    let x = uniform(&mut r, &[n, ci, h, w], 1.0);
    let k = uniform(&mut r, &[co, ci, kh, kw], 1.0);
    let bias = uniform(&mut r, &[co], 1.0);
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.input(x.clone()), g.input(k.clone()), g.input(bias.clone()));
    let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
    max_diff(g.value(y).data(), &conv_oracle(&x, &k, bias.data(), stride, pad))
}

pub fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..20);
    let x = uniform(&mut r, &[3, n], 5.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.softmax(xv, 1).unwrap();
    let want: Vec<f64> = x.data().chunks(n).flat_map(softmax_oracle).collect();
    max_diff(g.value(y).data(), &want)
}

pub fn layer_norm_oracle(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]);
        }
    }
    out
}

pub fn layer_norm_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.gen_range(2..16);
    let x = uniform(&mut r, &[4, d], 3.0);
    let gamma = uniform(&mut r, &[d], 2.0);
    let beta = uniform(&mut r, &[d], 2.0);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.input(x.clone()), g.input(gamma.clone()), g.input(beta.clone()));
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    max_diff(g.value(y).data(), &layer_norm_oracle(x.data(), gamma.data(), beta.data(), 1e-5))
}

pub fn cross_entropy_oracle(logits: &[f64], targets: &[usize]) -> f64 {
    let c = logits.len() / targets.len();
    let mut total = 0.0;
    for (row, &t) in logits.chunks(c).zip(targets) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / targets.len() as f64
}

pub fn cross_entropy_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..6);
    let logits = uniform(&mut r, &[b, 7], 4.0);
    let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..7)).collect();
    let mut g = Graph::new();
    let lv = g.input(logits.clone());
    let loss = g.cross_entropy(lv, &targets).unwrap();
    (g.value(loss).item() - cross_entropy_oracle(logits.data(), &targets)).abs()
}

fn linear_oracle(x: &[f64], n: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = matmul_oracle(x, w.data(), n, din, dout);
    if let Some(b) = b {
        for row in y.chunks_mut(dout) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    y
}

/// Naive multi-head attention reading projection weights by name.
pub fn attention_oracle(store: &ParamStore, name: &str, x: &[f64], n: usize, d: usize, heads: usize) -> Vec<f64> {
    let p = |s: &str| store.id(&format!("{name}.{s}")).map(|id| store.value(id));
    let q = linear_oracle(x, n, p("q.weight").unwrap(), p("q.bias"));
    let k = linear_oracle(x, n, p("k.weight").unwrap(), p("k.bias"));
    let v = linear_oracle(x, n, p("v.weight").unwrap(), p("v.bias"));
    let dh = d / heads;
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax_oracle(&scores);
            for c in 0..dh {
                concat[i * d + h * dh + c] = (0..n).map(|j| w[j] * v[j * d + h * dh + c]).sum();
            }
        }
    }
    linear_oracle(&concat, n, p("o.weight").unwrap(), p("o.bias"))
}

pub fn attention_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.gen_range(0..3)];
    let d = heads * r.gen_range(1..5);
    let n = r.gen_range(1..8);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, heads, &mut r).unwrap();
    let x = uniform(&mut r, &[n, d], 1.0);
    let mut g = Graph::with_params(&store);
    let xv = g.input(x.clone());
    let (y, _) = mha.forward(&mut g, xv).unwrap();
    max_diff(g.value(y).data(), &attention_oracle(&store, "mha", x.data(), n, d, heads))
}

pub fn encoder_config(d: usize, layers: usize, n: usize, positions: PositionalEncoding) -> TransformerEncoderConfig {
    TransformerEncoderConfig {
        model_dim: d,
        num_heads: 4,
        num_layers: layers,
        feedforward_dim: 2 * d,
        dropout: 0.0,
        positional_encoding: positions,
        max_len: n,
    }
}

/// Permutes rows of a `[n, rest...]` buffer: row `i` of the result is row
/// `perm[i]` of the input.
pub fn permute_rows(data: &[f64], perm: &[usize]) -> Vec<f64> {
    let w = data.len() / perm.len();
    perm.iter().flat_map(|&p| data[p * w..(p + 1) * w].iter().copied()).collect()
}

pub fn shuffled(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

/// Max deviation of `encoder(P x)` from `P encoder(x)` without positions.
pub fn equivariance_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (r.gen_range(2..10), 4 * r.gen_range(1..5));
    let cfg = encoder_config(d, 2, n, PositionalEncoding::None);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", &cfg, &mut r).unwrap();
    let x = uniform(&mut r, &[n, d], 1.0);
    let perm = shuffled(n, &mut r);
    let run = |t: Tensor| {
        let mut g = Graph::with_params(&store);
        let v = g.input(t);
        let (y, _) = enc.forward(&mut g, v).unwrap();
        g.value(y).data().to_vec()
    };
    let y = run(x.clone());
    let yp = run(Tensor::new(&[n, d], permute_rows(x.data(), &perm)).unwrap());
    max_diff(&yp, &permute_rows(&y, &perm))
}

/// Max change of Z_a and Z_v when audio patches and clips are permuted, with
/// positions disabled on the instance-level encoders.
pub fn cls_invariance_error(seed: u64) -> f64 {
    let mut cfg = ModelConfig::toy(Modality::Multimodal);
    cfg.audio.num_patches = 5;
    cfg.audio.transformer.max_len = 6;
    cfg.vision.num_clips = 4;
    cfg.vision.stage2.max_len = 5;
    cfg.audio.transformer.positional_encoding = PositionalEncoding::None;
    cfg.vision.stage2.positional_encoding = PositionalEncoding::None;
    let model = UxModel::new(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let (a, v) = (&cfg.audio, &cfg.vision);
    let patches = uniform(&mut r, &[a.num_patches, a.patch_height, a.patch_width], 1.0);
    let clips = uniform(&mut r, &[v.num_clips, v.frames_per_clip, v.frame_size, v.frame_size], 1.0);
    let pa = shuffled(a.num_patches, &mut r);
    let pv = shuffled(v.num_clips, &mut r);
    let z = |p: Tensor, c: Tensor| {
        let mut g = Graph::with_params(&model.params);
        let out = model.arch.forward(&mut g, &ModelInput { patches: Some(p), clips: Some(c) }).unwrap();
        (g.value(out.z_audio.unwrap()).data().to_vec(), g.value(out.z_vision.unwrap()).data().to_vec())
    };
    let (za, zv) = z(patches.clone(), clips.clone());
    let p2 = Tensor::new(patches.shape(), permute_rows(patches.data(), &pa)).unwrap();
    let c2 = Tensor::new(clips.shape(), permute_rows(clips.data(), &pv)).unwrap();
    let (za2, zv2) = z(p2, c2);
    max_diff(&za, &za2).max(max_diff(&zv, &zv2))
}

pub fn softmax_shift_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..30);
    let x = uniform(&mut r, &[n], 10.0);
    let c = r.gen_range(-100.0..100.0);
    let shifted = Tensor::from_fn(&[n], |i| x.data()[i] + c);
    let run = |t: Tensor| {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = g.softmax(v, 0).unwrap();
        g.value(y).data().to_vec()
    };
    max_diff(&run(x), &run(shifted))
}

pub fn uniform_ce_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..10);
    let value = r.gen_range(-50.0..50.0);
    let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..7)).collect();
    let mut g = Graph::new();
    let l = g.input(Tensor::full(&[b, 7], value));
    let loss = g.cross_entropy(l, &targets).unwrap();
    (g.value(loss).item() - 7f64.ln()).abs()
}
