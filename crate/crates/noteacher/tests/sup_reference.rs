//! Supervised training checked against a handwritten reference loop.
//!
//! The reference below shares nothing with the library's training stack
//! except the seeded random streams: it keeps weights in plain `Vec<f64>`,
//! computes the forward pass, the cross-entropy gradient, and the AdamW
//! update by hand, and replays the same shuffles. Every step loss and the
//! final parameters must agree with the real trainer to 1e-10.

use noteacher::data::{gen_synthetic, AugPolicy, Geometry, Structure};
use noteacher::losses::{TaskKind, PROB_CLAMP};
use noteacher::models::Activation;
use noteacher::rng::StreamRng;
use noteacher::trainer::{train, Method, TrainConfig, TrainData};

const TOL: f64 = 1e-10;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * 1f64.max(a.abs()).max(b.abs())
}

/// Row-major matrix as nested vecs, `rows x cols`.
type Mat = Vec<Vec<f64>>;

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

/// `a (r x k) * b (k x c)`, skipping zero entries of `a` the way the
/// library's kernel does so the accumulation order matches exactly.
fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(r, c);
    for i in 0..r {
        for j in 0..k {
            let v = a[i][j];
            if v == 0.0 {
                continue;
            }
            for l in 0..c {
                out[i][l] += v * b[j][l];
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    let (r, c) = (a.len(), a[0].len());
    let mut out = zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out[j][i] = a[i][j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer of the reference net.
struct RefLayer {
    w: Mat,      // fan_in x fan_out
    b: Vec<f64>, // fan_out
}

/// Glorot-uniform init drawn from the same named stream the trainer uses,
/// in the same order: all of layer l's weights row-major, biases zero.
fn init_layers(dims: &[usize], seed: u64) -> Vec<RefLayer> {
    let mut rng = StreamRng::new(seed, "init-1");
    dims.windows(2)
        .map(|io| {
            let (fan_in, fan_out) = (io[0], io[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = zeros(fan_in, fan_out);
            for row in w.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.uniform(-bound, bound);
                }
            }
            RefLayer {
                w,
                b: vec![0.0; fan_out],
            }
        })
        .collect()
}

/// Per-tensor AdamW state, updated entry-by-entry in row-major order.
struct RefAdam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
    t: u64,
    m: Vec<Vec<f64>>, // one flat vec per tracked tensor
    v: Vec<Vec<f64>>,
}

impl RefAdam {
    fn new(cfg: &TrainConfig, sizes: &[usize]) -> RefAdam {
        RefAdam {
            lr: cfg.lr,
            beta1: cfg.adam_betas.0,
            beta2: cfg.adam_betas.1,
            eps: cfg.adam_eps,
            wd: cfg.weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            for i in 0..p.len() {
                let grad = grads[k][i];
                self.m[k][i] = self.beta1 * self.m[k][i] + (1.0 - self.beta1) * grad;
                self.v[k][i] = self.beta2 * self.v[k][i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = self.m[k][i] / bc1;
                let v_hat = self.v[k][i] / bc2;
                let value = p[i];
                p[i] = value - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.wd * value);
            }
        }
    }
}

fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// One supervised step on a two-layer net: forward, multi-label
/// cross-entropy, hand-derived backward, AdamW. Returns the batch loss.
fn ref_step(layers: &mut [RefLayer], opt: &mut RefAdam, x: &Mat, y: &Mat) -> f64 {
    assert_eq!(
        layers.len(),
        2,
        "reference backward is written for one hidden layer"
    );
    let (lo, hi) = PROB_CLAMP;
    let batch = x.len();
    let k_out = layers[1].b.len();

    // Forward.
    let mut z1 = matmul(x, &layers[0].w);
    for row in z1.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += layers[0].b[c];
        }
    }
    let h: Mat = z1
        .iter()
        .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
        .collect();
    let mut z2 = matmul(&h, &layers[1].w);
    for row in z2.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += layers[1].b[c];
        }
    }
    let p: Mat = z2
        .iter()
        .map(|row| row.iter().map(|&v| sigmoid(v)).collect())
        .collect();

    // Loss: mean over every entry of -(y ln p + (1-y) ln(1-p)), probabilities
    // clamped before the log.
    let n = (batch * k_out) as f64;
    let mut total = 0.0;
    for r in 0..batch {
        for c in 0..k_out {
            let cp = p[r][c].clamp(lo, hi);
            let omf = -p[r][c] + 1.0;
            let c1p = omf.clamp(lo, hi);
            total += y[r][c] * cp.ln() + (1.0 - y[r][c]) * c1p.ln();
        }
    }
    let loss = -(total / n);

    // Backward. The clamp passes gradient only where the pre-clamp value is
    // inside the bounds (inclusive); the two log branches accumulate into
    // the probability gradient in the order the reverse pass visits them.
    let gs = -1.0 / n;
    let mut dz2 = zeros(batch, k_out);
    for r in 0..batch {
        for c in 0..k_out {
            let pv = p[r][c];
            let cp = pv.clamp(lo, hi);
            let omf = -pv + 1.0;
            let c1p = omf.clamp(lo, hi);
            let mut gp = 0.0;
            if (lo..=hi).contains(&omf) {
                gp += -(gs * (1.0 - y[r][c]) / c1p);
            }
            if (lo..=hi).contains(&pv) {
                gp += gs * y[r][c] / cp;
            }
            dz2[r][c] = gp * pv * (1.0 - pv);
        }
    }

    let dw2 = matmul(&transpose(&h), &dz2);
    let mut db2 = vec![0.0; k_out];
    for c in 0..k_out {
        for row in dz2.iter() {
            db2[c] += row[c];
        }
    }
    let dh = matmul(&dz2, &transpose(&layers[1].w));
    let h_dim = layers[0].b.len();
    let mut dz1 = zeros(batch, h_dim);
    for r in 0..batch {
        for c in 0..h_dim {
            dz1[r][c] = if z1[r][c] > 0.0 { dh[r][c] } else { 0.0 };
        }
    }
    let dw1 = matmul(&transpose(x), &dz1);
    let mut db1 = vec![0.0; h_dim];
    for c in 0..h_dim {
        for row in dz1.iter() {
            db1[c] += row[c];
        }
    }

    let grads = vec![flatten(&dw1), db1, flatten(&dw2), db2];
    let mut w1_flat = flatten(&layers[0].w);
    let mut b1 = layers[0].b.clone();
    let mut w2_flat = flatten(&layers[1].w);
    let mut b2 = layers[1].b.clone();
    {
        let mut params: Vec<&mut [f64]> = vec![&mut w1_flat, &mut b1, &mut w2_flat, &mut b2];
        opt.step(&mut params, &grads);
    }
    let cols1 = layers[0].w[0].len();
    for (i, v) in w1_flat.iter().enumerate() {
        layers[0].w[i / cols1][i % cols1] = *v;
    }
    layers[0].b = b1;
    let cols2 = layers[1].w[0].len();
    for (i, v) in w2_flat.iter().enumerate() {
        layers[1].w[i / cols2][i % cols2] = *v;
    }
    layers[1].b = b2;

    loss
}

#[test]
fn supervised_training_matches_a_handwritten_reference_loop() {
    let seed = 202408;
    let geometry = Geometry {
        feature_dim: 7,
        separation: 2.0,
        ..Geometry::default()
    };
    let pool = gen_synthetic(
        seed,
        60,
        2,
        TaskKind::MultiLabel,
        Structure::Flat,
        &geometry,
    )
    .unwrap();
    let idx: Vec<usize> = (0..60).collect();
    let labeled = pool.subset(&idx[..36]).unwrap();
    let val = pool.subset(&idx[36..48]).unwrap();
    let unlabeled = pool.subset_without_labels(&idx[48..]).unwrap();

    let config = TrainConfig {
        n_labeled: 8,
        n_unlabeled: 16,
        lr: 0.002,
        max_epochs: 7,
        checkpoint_interval_iters: 5,
        // Keep schedule knobs out of the way so the learning rate is constant.
        early_stop_patience: 10_000,
        reduce_lr_patience: 10_000,
        hidden: vec![9],
        activation: Activation::Relu,
        augment: AugPolicy::identity(),
        ..TrainConfig::baseline(Method::Sup, seed)
    };

    // Reference data: feature rows and targets in pool order.
    let x_all: Mat = (0..labeled.len())
        .map(|i| labeled.bag(i).row(0).to_vec())
        .collect();
    let y_all: Mat = (0..labeled.len())
        .map(|i| labeled.target_row(i).to_vec())
        .collect();

    // Reference loop: same init stream, same shuffle stream, same chunking.
    let dims = [7, 9, 2];
    let mut layers = init_layers(&dims, seed);
    let sizes = vec![7 * 9, 9, 9 * 2, 2];
    let mut opt = RefAdam::new(&config, &sizes);
    let mut batching = StreamRng::new(seed, "batching");
    let mut ref_losses = Vec::new();
    for _ in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        batching.shuffle(&mut order);
        for chunk in order.chunks(config.n_labeled) {
            let xb: Mat = chunk.iter().map(|&i| x_all[i].clone()).collect();
            let yb: Mat = chunk.iter().map(|&i| y_all[i].clone()).collect();
            ref_losses.push(ref_step(&mut layers, &mut opt, &xb, &yb));
        }
    }

    let data = TrainData::new(labeled, Some(unlabeled), val).unwrap();
    let run = train(&config, &data).unwrap();

    // 36 labeled rows in batches of 8 -> 5 steps per epoch, 7 epochs.
    assert_eq!(run.iters, 35);
    assert_eq!(run.step_losses.len(), ref_losses.len());
    for (i, (got, want)) in run.step_losses.iter().zip(&ref_losses).enumerate() {
        assert!(
            close(*got, *want),
            "step {i}: trainer loss {got} vs reference {want}"
        );
    }

    // The trained network must match the reference parameters entry-by-entry.
    let net = &run.final_nets[0];
    assert_eq!(net.layers.len(), layers.len());
    for (l, (lib, refl)) in net.layers.iter().zip(&layers).enumerate() {
        for r in 0..refl.w.len() {
            for c in 0..refl.w[0].len() {
                let got = lib.w[(r, c)];
                let want = refl.w[r][c];
                assert!(close(got, want), "layer {l} w[{r}][{c}]: {got} vs {want}");
            }
        }
        for c in 0..refl.b.len() {
            let got = lib.b[(0, c)];
            let want = refl.b[c];
            assert!(close(got, want), "layer {l} b[{c}]: {got} vs {want}");
        }
    }

    // Losses must actually go somewhere: the net learns, so the mean of the
    // last epoch's losses is below the first epoch's.
    let first: f64 = ref_losses[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = ref_losses[30..].iter().sum::<f64>() / 5.0;
    assert!(last < first, "no learning: first {first}, last {last}");
}
