//! Plain-loop reference implementations shared by the test suites.
#![allow(dead_code)]

use hiercvae_core::params::ParamStore;
use hiercvae_core::tensor::Tensor;

/// Plain-loop transcription of z + MLP(LN(z + MSA(LN(z)))) on token rows.
pub mod resformer {
    use super::ParamStore;

    pub type Rows = Vec<Vec<f64>>;

    fn get(s: &ParamStore, name: &str) -> (Vec<usize>, Vec<f64>) {
        let t = s.by_name(name).unwrap_or_else(|| panic!("{name}"));
        (t.shape().to_vec(), t.data().to_vec())
    }

    fn affine(s: &ParamStore, prefix: &str, x: &Rows) -> Rows {
        let (shape, w) = get(s, &format!("{prefix}.weight"));
        let (_, b) = get(s, &format!("{prefix}.bias"));
        let (i, o) = (shape[0], shape[1]);
        x.iter().map(|r| (0..o).map(|j| b[j] + (0..i).map(|k| r[k] * w[k * o + j]).sum::<f64>()).collect()).collect()
    }

    fn layer_norm(s: &ParamStore, prefix: &str, x: &Rows) -> Rows {
        let (_, gain) = get(s, &format!("{prefix}.gain"));
        let (_, bias) = get(s, &format!("{prefix}.bias"));
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let sd = (var + 1e-5).sqrt();
                r.iter().enumerate().map(|(k, v)| gain[k] * (v - mu) / sd + bias[k]).collect()
            })
            .collect()
    }

    fn msa(s: &ParamStore, prefix: &str, x: &Rows, heads: usize) -> Rows {
        let q = affine(s, &format!("{prefix}.q"), x);
        let k = affine(s, &format!("{prefix}.k"), x);
        let v = affine(s, &format!("{prefix}.v"), x);
        let (n, width) = (x.len(), x[0].len());
        let dk = width / heads;
        let mut ctx = vec![vec![0.0; width]; n];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..n {
                let scores: Vec<f64> =
                    (0..n).map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt()).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    ctx[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        affine(s, &format!("{prefix}.o"), &ctx)
    }

    fn add(a: &Rows, b: &Rows) -> Rows {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn softplus(x: f64) -> f64 {
        if x > 30.0 { x } else { x.exp().ln_1p() }
    }

    pub fn layer(s: &ParamStore, prefix: &str, z: &Rows, heads: usize) -> Rows {
        let a = msa(s, &format!("{prefix}.msa"), &layer_norm(s, &format!("{prefix}.ln1"), z), heads);
        let inner = layer_norm(s, &format!("{prefix}.ln2"), &add(z, &a));
        let hidden: Rows = affine(s, &format!("{prefix}.mlp.0"), &inner).into_iter().map(|r| r.into_iter().map(softplus).collect()).collect();
        add(z, &affine(s, &format!("{prefix}.mlp.1"), &hidden))
    }
}

pub fn robust(x: &[f64], xh: &[f64], s: &[f64]) -> f64 {
    (0..x.len()).map(|k| (x[k] - xh[k]).powi(2) / (2.0 * s[k] * s[k]) + 0.5 * (s[k] * s[k]).ln()).sum()
}

pub fn smooth(w: &Tensor, b: f64, z: &[Vec<f64>], x: &[Vec<f64>]) -> f64 {
    let d = x[0].len();
    let mut total = 0.0;
    for t in 1..z.len() {
        let mut s = b;
        for i in 0..d {
            for j in 0..d {
                s += x[t][i] * w.at(i, j) * x[t - 1][j];
            }
        }
        let beta = 1.0 / (1.0 + (-s).exp());
        total += beta * z[t].iter().zip(&z[t - 1]).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
    }
    total
}

pub fn entropy(maps: &[Tensor]) -> f64 {
    maps.iter()
        .map(|m| {
            let h: f64 = (0..m.rows()).map(|i| m.row(i).iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum::<f64>()).sum();
            h / m.rows() as f64
        })
        .sum::<f64>()
        / maps.len() as f64
}

/// softmax over pairs of tanh(W1·[x_t; h_i] + b1)·W2 + b2.
pub fn adaptive_weights(store: &ParamStore, x_t: &[f64], h: &Tensor) -> Vec<f64> {
    let w1 = store.by_name("adaptive.importance.0.weight").unwrap();
    let b1 = store.by_name("adaptive.importance.0.bias").unwrap().data();
    let w2 = store.by_name("adaptive.importance.1.weight").unwrap();
    let b2 = store.by_name("adaptive.importance.1.bias").unwrap().data()[0];
    let (d, hidden) = (x_t.len(), w2.rows());
    let logits: Vec<f64> = (0..h.rows())
        .map(|i| {
            let pair: Vec<f64> = x_t.iter().chain(h.row(i)).copied().collect();
            b2 + (0..hidden)
                .map(|j| (b1[j] + (0..2 * d).map(|k| pair[k] * w1.at(k, j)).sum::<f64>()).tanh() * w2.at(j, 0))
                .sum::<f64>()
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// σ after `step + 1` steps as the root of summed per-step variances.
pub fn accumulated_sigma(per_step: &[Vec<f64>], step: usize, col: usize) -> f64 {
    (0..=step).map(|j| per_step[j][col].powi(2)).sum::<f64>().sqrt()
}

pub mod metrics {
    pub fn ecdf(xs: &[f64], t: f64) -> f64 {
        xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64
    }

    /// ∫ |F − G| over the pooled support.
    pub fn w1_integral(a: &[f64], b: &[f64]) -> f64 {
        let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
        pts.sort_by(f64::total_cmp);
        pts.windows(2).map(|w| (ecdf(a, w[0]) - ecdf(b, w[0])).abs() * (w[1] - w[0])).sum()
    }

    pub fn quantile(xs: &[f64], u: f64) -> f64 {
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        for (i, v) in s.iter().enumerate() {
            if (i + 1) as f64 >= u * n {
                return *v;
            }
        }
        s[s.len() - 1]
    }

    pub fn w1_grid(a: &[f64], b: &[f64], grid: usize) -> f64 {
        (0..grid).map(|i| (i as f64 + 0.5) / grid as f64).map(|u| (quantile(a, u) - quantile(b, u)).abs()).sum::<f64>() / grid as f64
    }

    pub fn ks(a: &[f64], b: &[f64]) -> f64 {
        a.iter().chain(b).map(|&t| (ecdf(a, t) - ecdf(b, t)).abs()).fold(0.0, f64::max)
    }

    pub fn skew(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
        if m2.sqrt() < 1e-8 { 0.0 } else { m3 / m2.powf(1.5) }
    }

    pub fn coverage(y: &[f64], m: &[f64], s: &[f64], z: f64) -> f64 {
        let mut hit = 0usize;
        for i in 0..y.len() {
            if y[i] >= m[i] - z * s[i] && y[i] <= m[i] + z * s[i] {
                hit += 1;
            }
        }
        hit as f64 / y.len() as f64
    }
}
