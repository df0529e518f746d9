#![allow(dead_code)]

use mtsnet::attention::{DepMhsa, PositionMode};
use mtsnet::nn::{Conv3d, ConvGeometry};
use mtsnet::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Nested-loop cross-correlation of `[N, C, L, H, W]` with `[O, C, kt, kh, kw]`.
pub fn conv_brute(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeometry) -> Tensor<f64> {
    let (xd, wd) = (x.dims().to_vec(), w.dims().to_vec());
    let out = geom.output_extent([xd[2], xd[3], xd[4]]).unwrap();
    let dims = [xd[0], wd[0], out[0], out[1], out[2]];
    Tensor::from_fn(&dims, |flat| {
        let z = flat % out[2];
        let y = (flat / out[2]) % out[1];
        let t = (flat / (out[2] * out[1])) % out[0];
        let o = (flat / (out[2] * out[1] * out[0])) % wd[0];
        let n = flat / (out[2] * out[1] * out[0] * wd[0]);
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..xd[1] {
            for dt in 0..wd[2] {
                for i in 0..wd[3] {
                    for j in 0..wd[4] {
                        let p = [
                            (t * geom.stride[0] + dt) as isize - geom.padding[0] as isize,
                            (y * geom.stride[1] + i) as isize - geom.padding[1] as isize,
                            (z * geom.stride[2] + j) as isize - geom.padding[2] as isize,
                        ];
                        if p.iter().zip(&xd[2..]).all(|(&q, &e)| q >= 0 && (q as usize) < e) {
                            acc += x.at(&[n, c, p[0] as usize, p[1] as usize, p[2] as usize]) * w.at(&[o, c, dt, i, j]);
                        }
                    }
                }
            }
        }
        acc
    })
    .unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn conv_of(c: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    conv_brute(x, &c.weight, c.bias.as_ref(), c.geometry)
}

/// Single-head dense attention written out element by element.
pub fn dense_oracle(m: &DepMhsa<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let q = conv_of(&m.q, x);
    let k = conv_of(&m.k, x);
    let mut v = x.clone();
    for conv in &m.v {
        v = conv_of(conv, &v);
    }
    let d = x.dims();
    let (n, c, l, h, w) = (d[0], d[1], d[2], d[3], d[4]);
    let pos = |ch: usize, f: usize, y: usize, z: usize| -> f64 {
        m.pos.as_ref().map_or(0.0, |p| p.height.at(&[ch, 0, y, 0]) + p.width.at(&[ch, 0, 0, z]) + p.frames.at(&[ch, f, 0, 0]))
    };
    let dual = m.config.position == PositionMode::Dual;
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for f in 0..l {
            for i in 0..hw {
                let mut e = vec![0.0; hw];
                for (j, ej) in e.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for ch in 0..c {
                        let kj = k.at(&[b, ch, f, j / w, j % w]) + pos(ch, f, j / w, j % w);
                        s += q.at(&[b, ch, f, i / w, i % w]) * kj;
                    }
                    *ej = s / (c as f64).sqrt();
                }
                let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = e.iter().map(|v| (v - mx).exp()).sum();
                for ch in 0..c {
                    let mut y = 0.0;
                    for j in 0..hw {
                        y += (e[j] - mx).exp() / z * v.at(&[b, ch, f, j / w, j % w]);
                    }
                    if dual {
                        y += pos(ch, f, i / w, i % w);
                    }
                    out[(((b * c + ch) * l + f) * h + i / w) * w + i % w] = y;
                }
            }
        }
    }
    out
}

/// Pairwise Mann-Whitney count, straight from the definition.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

pub fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    // Coarse grid so that ties are common.
    let levels = rng.random_range(2..30);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}
