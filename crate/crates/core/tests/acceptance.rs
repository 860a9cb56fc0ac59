//! Acceptance suite. Every criterion writes one `PASS`/`FAIL` line to stderr
//! (bypassing the test harness capture) and then asserts its checks.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relume_core::decomposition::loss::{
    loss_fidelity, loss_illumination, loss_reflectance, DecompLossConfig,
};
use relume_core::igtr::{partition_regions, resample, CoAttention, IGTRBlock, IgtrVariant};
use relume_core::image::{Image, Mask};
use relume_core::llc::{
    build_condition, denoise_loss, forward_diffuse, make_schedule, DenoiseRange, LLCConfig,
    LocalLightingCorrection,
};
use relume_core::metrics::{ber_per, psnr, rmse_lab, sse, ssim, Region};
use relume_core::nn::{randn, Linear, ParamStore};
use relume_core::pipeline::{
    train_decomposition, train_diffusion, train_restore, CheckpointPaths, Pipeline, PipelineConfig,
    StageOptions, StageReport,
};
use relume_core::restoration::{pixel_loss, BilateralNetConfig};
use relume_core::synth::generate_samples;

struct Checks {
    items: Vec<(String, bool)>,
}

impl Checks {
    fn new() -> Self {
        Self { items: Vec::new() }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.items.push((what.into(), ok));
    }

    fn finish(self, n: usize, title: &str) {
        let ok = self.items.iter().all(|(_, ok)| *ok);
        let mut err = std::io::stderr().lock();
        let _ = writeln!(
            err,
            "acceptance {n} {title}: {}",
            if ok { "PASS" } else { "FAIL" }
        );
        for (what, ok) in &self.items {
            let _ = writeln!(err, "    [{}] {what}", if *ok { "ok" } else { "FAILED" });
        }
        assert!(ok, "criterion {n} ({title}) failed");
    }
}

fn cpu() -> Device {
    Device::Cpu
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

fn binary_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

// ---------------------------------------------------------------- 1

/// Largest element-wise relative error between autograd and central
/// differences of a scalar function of several tensors.
fn gradient_error(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Tensor]) -> f64 {
    const H: f64 = 1e-6;
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| Var::from_tensor(t).unwrap())
        .collect();
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var.as_tensor())
            .map(flat)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = flat(&inputs[i]);
        for j in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[j] += delta;
                let mut args = inputs.to_vec();
                args[i] = Tensor::from_vec(v, inputs[i].dims(), &cpu()).unwrap();
                f(&args).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let scale = analytic[j].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[j] - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn criterion_1_loss_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [1, 3, 4, 4];
    let six: Vec<Tensor> = (0..6)
        .map(|_| uniform(&mut rng, &shape, 0.05, 0.95))
        .collect();
    let cfg = DecompLossConfig::default();
    let mut c = Checks::new();

    let fid = gradient_error(
        &|a| loss_fidelity(&a[0], &a[1], &a[2], &a[3], &a[4], &a[5]).unwrap(),
        &six,
    );
    c.check(
        format!("fidelity: max relative error {fid:.2e}"),
        fid < 1e-4,
    );
    let ill = gradient_error(
        &|a| loss_illumination(&a[0], &a[1], &a[2], &a[3], &a[4], &a[5]).unwrap(),
        &six,
    );
    c.check(
        format!("illumination: max relative error {ill:.2e}"),
        ill < 1e-4,
    );
    let refl = gradient_error(
        &|a| loss_reflectance(&a[0], &a[1], &a[2], &cfg).unwrap(),
        &six[..3],
    );
    c.check(
        format!("reflectance: max relative error {refl:.2e}"),
        refl < 1e-4,
    );

    let mask = binary_mask(&mut rng, &[1, 1, 4, 4]);
    let eps = uniform(&mut rng, &shape, -2.0, 2.0);
    let eps_hat = uniform(&mut rng, &shape, -2.0, 2.0);
    let den = gradient_error(
        &|a| {
            denoise_loss(&a[0], &a[1], &mask, DenoiseRange::Local)
                .unwrap()
                .value
        },
        &[eps, eps_hat],
    );
    c.check(
        format!("masked denoising: max relative error {den:.2e}"),
        den < 1e-4,
    );

    let pix = gradient_error(&|a| pixel_loss(&a[0], &a[1]).unwrap(), &six[..2]);
    c.check(
        format!("restoration pixel term: max relative error {pix:.2e}"),
        pix < 1e-4,
    );

    let took = start.elapsed();
    c.check(
        format!("runtime {took:?} under 1 min"),
        took < Duration::from_secs(60),
    );
    c.finish(1, "loss gradients vs central differences");
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_diffusion_statistics() {
    let (steps, b0, b1) = (1000usize, 1e-4, 0.02);
    let sched = make_schedule(steps, b0, b1).unwrap();
    let mut c = Checks::new();

    let ab = sched.alpha_bars();
    c.check(
        "alpha-bar strictly decreasing",
        ab.windows(2).all(|w| w[1] < w[0]),
    );
    let mut prod = 1.0;
    let mut worst: f64 = 0.0;
    for t in 1..=steps {
        let beta = b0 + (b1 - b0) * (t - 1) as f64 / (steps - 1) as f64;
        prod *= 1.0 - beta;
        worst = worst.max((sched.alpha_bar(t) - prod).abs());
    }
    c.check(
        format!("alpha-bar vs direct product: max error {worst:.1e}"),
        worst < 1e-12,
    );

    let n = 10_000;
    let x0_val = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in [1, 250, 500, 1000] {
        let x0 = Tensor::full(x0_val, (n, 1), &cpu()).unwrap();
        let eps = randn(&mut rng, &[n, 1], DType::F64, &cpu()).unwrap();
        let xt = flat(&forward_diffuse(&x0, &vec![t; n], &eps, &sched).unwrap());
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        let want_mean = sched.alpha_bar(t).sqrt() * x0_val;
        let want_std = (1.0 - sched.alpha_bar(t)).sqrt();
        let se_mean = want_std / (n as f64).sqrt();
        let se_std = want_std / (2.0 * (n - 1) as f64).sqrt();
        c.check(
            format!(
                "t={t}: mean {mean:.5} vs {want_mean:.5} ({:.2} SE)",
                (mean - want_mean).abs() / se_mean
            ),
            (mean - want_mean).abs() < 3.0 * se_mean,
        );
        c.check(
            format!(
                "t={t}: std {std:.5} vs {want_std:.5} ({:.2} SE)",
                (std - want_std).abs() / se_std
            ),
            (std - want_std).abs() < 3.0 * se_std,
        );
    }
    c.finish(2, "diffusion schedule and forward process statistics");
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_locality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [2, 3, 8, 8];
    let xt = uniform(&mut rng, &shape, -3.0, 3.0);
    let x0 = uniform(&mut rng, &shape, 0.0, 1.0);
    let zeros = Tensor::zeros((2, 1, 8, 8), DType::F64, &cpu()).unwrap();
    let ones = Tensor::ones((2, 1, 8, 8), DType::F64, &cpu()).unwrap();
    let mut c = Checks::new();
    c.check(
        "empty mask condition equals x0 bit-exactly",
        flat(&build_condition(&xt, &x0, &zeros).unwrap()) == flat(&x0),
    );
    c.check(
        "full mask condition equals x_t bit-exactly",
        flat(&build_condition(&xt, &x0, &ones).unwrap()) == flat(&xt),
    );

    let mask = binary_mask(&mut rng, &[2, 1, 8, 8]);
    let eps = uniform(&mut rng, &shape, -2.0, 2.0);
    let eps_hat = Var::from_tensor(&uniform(&mut rng, &shape, -2.0, 2.0)).unwrap();
    let loss = denoise_loss(&eps, eps_hat.as_tensor(), &mask, DenoiseRange::Local).unwrap();
    let g = flat(
        loss.value
            .backward()
            .unwrap()
            .get(eps_hat.as_tensor())
            .unwrap(),
    );
    let m = flat(&mask.broadcast_as(&shape).unwrap().contiguous().unwrap());
    let outside_zero = g
        .iter()
        .zip(&m)
        .filter(|(_, m)| **m == 0.0)
        .all(|(g, _)| *g == 0.0);
    let inside_live = g
        .iter()
        .zip(&m)
        .filter(|(_, m)| **m == 1.0)
        .any(|(g, _)| *g != 0.0);
    c.check(
        "denoising gradient exactly zero outside the mask",
        outside_zero,
    );
    c.check("denoising gradient nonzero inside the mask", inside_live);

    let mut cfg = LLCConfig::default();
    cfg.schedule_test.steps = 5;
    let llc = LocalLightingCorrection::new(&cfg, 3, DType::F32).unwrap();
    let l_s = uniform(&mut rng, &[2, 3, 32, 32], 0.0, 1.0)
        .to_dtype(DType::F32)
        .unwrap();
    let mask = binary_mask(&mut rng, &[2, 1, 32, 32])
        .to_dtype(DType::F32)
        .unwrap();
    let out = llc.sample(&l_s, &mask, 11).unwrap();
    let (o, l) = (flat(&out), flat(&l_s));
    let m = flat(
        &mask
            .broadcast_as((2, 3, 32, 32))
            .unwrap()
            .contiguous()
            .unwrap(),
    );
    let kept = (0..o.len())
        .filter(|&i| m[i] == 0.0)
        .all(|i| o[i].to_bits() == l[i].to_bits());
    let changed = (0..o.len()).filter(|&i| m[i] == 1.0).any(|i| o[i] != l[i]);
    c.check("sampler keeps L_s bit-exactly outside the mask", kept);
    c.check("sampler changes pixels inside the mask", changed);
    c.finish(3, "locality of conditioning, loss and sampling");
}

// ---------------------------------------------------------------- 4

fn dense_linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = l
        .weight()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec2::<f64>()
        .unwrap();
    let b = l.bias().map(flat);
    (0..w.len())
        .map(|o| {
            let mut acc = b.as_ref().map_or(0.0, |b| b[o]);
            for (wi, xi) in w[o].iter().zip(x) {
                acc += wi * xi;
            }
            acc
        })
        .collect()
}

/// Softmax attention over one region written with explicit loops.
fn dense_co_attention(
    coa: &CoAttention,
    q: &[Vec<f64>],
    kv: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let [wq, wk, wv, wo] = coa.projections();
    let scale = (coa.head_dim() as f64).sqrt();
    let qs: Vec<_> = q.iter().map(|x| dense_linear(wq, x)).collect();
    let ks: Vec<_> = kv.iter().map(|x| dense_linear(wk, x)).collect();
    let vs: Vec<_> = kv.iter().map(|x| dense_linear(wv, x)).collect();
    let mut weights = Vec::new();
    let mut outputs = Vec::new();
    for qi in &qs {
        let logits: Vec<f64> = ks
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mut mixed = vec![0.0; vs[0].len()];
        for (aj, vj) in a.iter().zip(&vs) {
            for (m, v) in mixed.iter_mut().zip(vj) {
                *m += aj * v;
            }
        }
        outputs.push(dense_linear(wo, &mixed));
        weights.push(a);
    }
    (outputs, weights)
}

#[test]
fn criterion_4_attention() {
    let channels = 8;
    let mut store = ParamStore::new(4, DType::F64);
    let coa = CoAttention::new(&mut store, "coa", channels).unwrap();
    let f_r = store.randn(&[2, channels, 4, 4]).unwrap();
    let f_l = store.randn(&[2, channels, 4, 4]).unwrap();
    // 2x2 regions: four tokens each
    let q = partition_regions(&f_r, 2).unwrap();
    let kv = partition_regions(&f_l, 2).unwrap();
    let got = coa
        .forward_tokens(&q, &kv)
        .unwrap()
        .to_vec3::<f64>()
        .unwrap();
    let weights = coa
        .attention_weights(&q, &kv)
        .unwrap()
        .to_vec3::<f64>()
        .unwrap();
    let qv = q.to_vec3::<f64>().unwrap();
    let kvv = kv.to_vec3::<f64>().unwrap();
    let mut c = Checks::new();
    c.check("regions hold 4 tokens", q.dims()[1] == 4);
    let (mut out_err, mut w_err, mut row_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for r in 0..qv.len() {
        let (want, want_w) = dense_co_attention(&coa, &qv[r], &kvv[r]);
        for t in 0..4 {
            for (g, w) in got[r][t].iter().zip(&want[t]) {
                out_err = out_err.max((g - w).abs());
            }
            for (g, w) in weights[r][t].iter().zip(&want_w[t]) {
                w_err = w_err.max((g - w).abs());
            }
            row_err = row_err.max((weights[r][t].iter().sum::<f64>() - 1.0).abs());
        }
    }
    c.check(
        format!("output vs dense loops: max error {out_err:.1e}"),
        out_err < 1e-6,
    );
    c.check(
        format!("weights vs dense loops: max error {w_err:.1e}"),
        w_err < 1e-6,
    );
    c.check(
        format!("rows sum to 1: max error {row_err:.1e}"),
        row_err < 1e-6,
    );

    let f_r = store.randn(&[1, channels, 8, 8]).unwrap();
    let f_l = store.randn(&[1, channels, 8, 8]).unwrap();
    for v in IgtrVariant::ALL.into_iter().filter(|v| v.has_residual()) {
        let mut s = ParamStore::new(40, DType::F64);
        let block = IGTRBlock::new(&mut s, "igtr", channels, 4, v).unwrap();
        let zeroed = s.zero_matching(".wv.").unwrap();
        let out = block.forward(&f_r, &f_l).unwrap();
        c.check(
            format!(
                "{}: zeroed value projections ({zeroed} tensors) give the identity on f_R",
                v.name()
            ),
            zeroed > 0 && flat(&out) == flat(&f_r),
        );
    }
    c.finish(4, "co-attention oracle and residual identity");
}

// ---------------------------------------------------------------- 5

fn offsets(dx: &[f64], dy: &[f64], h: usize, w: usize) -> Tensor {
    let v: Vec<f64> = dx.iter().chain(dy).copied().collect();
    Tensor::from_vec(v, (1, 2, h, w), &cpu()).unwrap()
}

#[test]
fn criterion_5_resampling() {
    let (h, w, ch) = (6, 7, 3);
    let mut store = ParamStore::new(5, DType::F64);
    let f = store.randn(&[1, ch, h, w]).unwrap();
    let fv = flat(&f);
    let mut c = Checks::new();

    let zero = Tensor::zeros((1, 2, h, w), DType::F64, &cpu()).unwrap();
    c.check(
        "zero offsets reproduce f_L exactly",
        flat(&resample(&f, &zero).unwrap()) == fv,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dx: Vec<f64> = (0..h * w)
        .map(|_| rng.random_range(-3..=3) as f64)
        .collect();
    let dy: Vec<f64> = (0..h * w)
        .map(|_| rng.random_range(-3..=3) as f64)
        .collect();
    let got = flat(&resample(&f, &offsets(&dx, &dy, h, w)).unwrap());
    let mut exact = true;
    for c_ in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = (x as i64 + dx[p] as i64).clamp(0, w as i64 - 1) as usize;
                let sy = (y as i64 + dy[p] as i64).clamp(0, h as i64 - 1) as usize;
                exact &= got[(c_ * h + y) * w + x] == fv[(c_ * h + sy) * w + sx];
            }
        }
    }
    c.check("integer offsets match direct indexing", exact);

    // f(x, y) = a·x + b·y + k per channel
    let coef = [(0.5, -1.25, 0.3), (2.0, 0.75, -1.0), (-0.4, 0.1, 5.0)];
    let ramp: Vec<f64> = (0..ch * h * w)
        .map(|i| {
            let (a, b, k) = coef[i / (h * w)];
            a * (i % w) as f64 + b * ((i / w) % h) as f64 + k
        })
        .collect();
    let ramp = Tensor::from_vec(ramp, (1, ch, h, w), &cpu()).unwrap();
    let got = flat(&resample(&ramp, &offsets(&vec![0.5; h * w], &vec![0.5; h * w], h, w)).unwrap());
    let mut worst: f64 = 0.0;
    for (c_, &(a, b, k)) in coef.iter().enumerate() {
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let want = a * (x as f64 + 0.5) + b * (y as f64 + 0.5) + k;
                worst = worst.max((got[(c_ * h + y) * w + x] - want).abs());
            }
        }
    }
    c.check(
        format!("half-pixel offsets on linear ramps: max error {worst:.1e}"),
        worst < 1e-6,
    );
    c.finish(5, "offset resampling");
}

// ---------------------------------------------------------------- 6

fn shadow_rmse(pipeline: &Pipeline, held_out: &[relume_core::image::ShadowSample]) -> (f64, f64) {
    let (mut pred, mut input) = (0.0, 0.0);
    for (i, s) in held_out.iter().enumerate() {
        let out = pipeline.run(&s.shadow, &s.mask, i as u64).unwrap();
        pred += rmse_lab(&out.prediction, &s.shadow_free, &s.mask, Region::Shadow).unwrap();
        input += rmse_lab(&s.shadow, &s.shadow_free, &s.mask, Region::Shadow).unwrap();
    }
    let n = held_out.len() as f64;
    (pred / n, input / n)
}

#[test]
fn criterion_6_desk_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::desk();
    let train = generate_samples(32, cfg.train.resolution, 6).unwrap();
    let held_out = generate_samples(16, cfg.train.resolution, 606).unwrap();
    let opts = StageOptions::default();
    let full = CheckpointPaths::in_dir(dir.path());
    let d = train_decomposition(&cfg, &train, &full.decomposition, &opts).unwrap();
    let l = train_diffusion(&cfg, &train, &full.decomposition, &full.diffusion, &opts).unwrap();
    let r = train_restore(
        &cfg,
        &train,
        &full.decomposition,
        &full.diffusion,
        &full.restoration,
        &opts,
    )
    .unwrap();

    let mut base_cfg = cfg.clone();
    base_cfg.apply_variant("multiply").unwrap();
    let base = CheckpointPaths {
        restoration: dir.path().join("restoration-multiply.ckpt"),
        ..full.clone()
    };
    train_restore(
        &base_cfg,
        &train,
        &base.decomposition,
        &base.diffusion,
        &base.restoration,
        &opts,
    )
    .unwrap();

    let (pred_full, input) = shadow_rmse(&Pipeline::load(&full).unwrap(), &held_out);
    let (pred_base, _) = shadow_rmse(&Pipeline::load(&base).unwrap(), &held_out);
    let took = start.elapsed();

    let mut c = Checks::new();
    for rep in [&d, &l, &r] {
        c.check(
            format!(
                "{} trained {} steps, probe loss {:.4} -> {:.4}",
                rep.kind, rep.steps, rep.probe_initial, rep.probe_final
            ),
            rep.finished() && rep.probe_final < rep.probe_initial,
        );
    }
    c.check(
        format!("held-out shadow LAB RMSE: prediction {pred_full:.3} < input {input:.3}"),
        pred_full < input,
    );
    c.check(
        format!("full {pred_full:.3} < multiply baseline {pred_base:.3}"),
        pred_full < pred_base,
    );
    c.check(
        format!("runtime {took:?} under 4 h"),
        took < Duration::from_secs(4 * 3600),
    );
    c.finish(6, "desk-scale end to end");
}

// ---------------------------------------------------------------- 7

fn smoke_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.train.resolution = 32;
    cfg.train.iters_decomp = 200;
    cfg.train.iters_diffusion = 200;
    cfg.train.iters_restore = 200;
    cfg.train.checkpoint_every = 0;
    cfg.llc.schedule_test.steps = 10;
    cfg
}

fn all_finite(r: &StageReport) -> bool {
    r.losses.len() == r.total_steps
        && r.losses.iter().all(|l| l.is_finite())
        && r.probe_final.is_finite()
}

#[test]
fn criterion_7_ablation_wiring() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_samples(8, 32, 7).unwrap();
    let probe = generate_samples(1, 48, 77).unwrap().remove(0);
    let opts = StageOptions::default();
    let base = smoke_config();
    let decomp = dir.path().join("decomposition.ckpt");
    let mut c = Checks::new();
    let rep = train_decomposition(&base, &data, &decomp, &opts).unwrap();
    c.check("decomposition: 200 finite steps", all_finite(&rep));

    let mut diffusion = None;
    for name in LLCConfig::VARIANTS {
        let mut cfg = base.clone();
        cfg.apply_variant(name).unwrap();
        let want = LLCConfig::variant(name).unwrap();
        let path = dir.path().join(format!("diffusion-{name}.ckpt"));
        let result = train_diffusion(&cfg, &data, &decomp, &path, &opts);
        let finite = result.as_ref().map(all_finite).unwrap_or(false);
        let (llc, _) = relume_core::pipeline::load_diffusion(&path).unwrap();
        let l_s = Tensor::full(0.5f32, (1, 3, 32, 32), &cpu()).unwrap();
        let m = Tensor::ones((1, 1, 32, 32), DType::F32, &cpu()).unwrap();
        let shape_ok = llc
            .sample(&l_s, &m, 0)
            .map(|t| t.dims() == l_s.dims())
            .unwrap_or(false);
        c.check(
            format!(
                "diffusion variant {name}: wiring {:?}/{:?}, 200 finite steps, sample shape",
                want.condition_mode, want.denoise_range
            ),
            llc.cfg.condition_mode == want.condition_mode
                && llc.cfg.denoise_range == want.denoise_range
                && finite
                && shape_ok,
        );
        if name == "ours" {
            diffusion = Some(path);
        }
    }
    let diffusion = diffusion.unwrap();

    for name in BilateralNetConfig::VARIANTS {
        let mut cfg = base.clone();
        cfg.apply_variant(name).unwrap();
        let path = dir.path().join(format!("restoration-{name}.ckpt"));
        let rep = train_restore(&cfg, &data, &decomp, &diffusion, &path, &opts);
        let finite = rep
            .as_ref()
            .map(|r| name == "multiply" || all_finite(r))
            .unwrap_or(false);
        let pipeline = Pipeline::load(&CheckpointPaths {
            decomposition: decomp.clone(),
            diffusion: diffusion.clone(),
            restoration: path,
        })
        .unwrap();
        let shape_ok = pipeline
            .run(&probe.shadow, &probe.mask, 0)
            .map(|o| {
                o.prediction.dims() == probe.shadow.dims()
                    && o.prediction.data().iter().all(|v| v.is_finite())
            })
            .unwrap_or(false);
        c.check(
            format!(
                "restoration variant {name}: wiring {}, {} trainable params, finite training, output shape",
                pipeline.restoration.net.config().variant_name(),
                rep.as_ref().map_or(0, |r| r.trainable_params)
            ),
            pipeline.restoration.net.config().variant_name() == name && finite && shape_ok,
        );
    }
    c.finish(7, "ablation variants by name");
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_metrics() {
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Image::from_fn(n, n, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
    let mask = Mask::from_fn(n, n, |y, x| {
        (x as i64 - 100).pow(2) + (y as i64 - 120).pow(2) < 60 * 60
    })
    .unwrap();
    let mut c = Checks::new();
    for region in Region::ALL {
        let r = rmse_lab(&x, &x, &mask, region).unwrap();
        c.check(format!("RMSE(x, x) {} = {r}", region.tag()), r == 0.0);
        let s = ssim(&x, &x, &mask, region).unwrap();
        c.check(format!("SSIM(x, x) {} = {s}", region.tag()), s == 1.0);
    }
    let zero = Image::filled(n, n, [0.0; 3]).unwrap();
    let tenth = Image::filled(n, n, [0.1; 3]).unwrap();
    for region in Region::ALL {
        let p = psnr(&tenth, &zero, &mask, region).unwrap();
        c.check(
            format!("PSNR(uniform 0.1 error) {} = {p}", region.tag()),
            p == 20.0,
        );
    }
    let scores = ber_per(&mask, &mask).unwrap();
    c.check(
        format!("BER/PER(perfect mask) = ({}, {})", scores.ber, scores.per),
        scores.ber == 0.0 && scores.per == 0.0,
    );

    let y = Image::from_fn(n, n, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
    let (s_sum, s_n) = sse(&x, &y, &mask, Region::Shadow).unwrap();
    let (ns_sum, ns_n) = sse(&x, &y, &mask, Region::NonShadow).unwrap();
    let (all_sum, all_n) = sse(&x, &y, &mask, Region::All).unwrap();
    let mse_s = s_sum / s_n as f64;
    let mse_ns = ns_sum / ns_n as f64;
    let mse_all = all_sum / all_n as f64;
    let weighted = (s_n as f64 * mse_s + ns_n as f64 * mse_ns) / (s_n + ns_n) as f64;
    let rel = (mse_all - weighted).abs() / mse_all;
    c.check(
        format!("pixel counts partition: {s_n} + {ns_n} = {all_n}"),
        s_n + ns_n == all_n,
    );
    c.check(
        format!("MSE_All vs weighted MSE_S/MSE_NS: relative gap {rel:.1e}"),
        rel < 1e-12,
    );
    c.finish(8, "metric identities");
}

// ---------------------------------------------------------------- 9

fn run_stages(
    cfg: &PipelineConfig,
    data: &[relume_core::image::ShadowSample],
    dir: &Path,
) -> Vec<StageReport> {
    let p = CheckpointPaths::in_dir(dir);
    let o = StageOptions::default();
    vec![
        train_decomposition(cfg, data, &p.decomposition, &o).unwrap(),
        train_diffusion(cfg, data, &p.decomposition, &p.diffusion, &o).unwrap(),
        train_restore(
            cfg,
            data,
            &p.decomposition,
            &p.diffusion,
            &p.restoration,
            &o,
        )
        .unwrap(),
    ]
}

#[test]
fn criterion_9_determinism() {
    let mut cfg = PipelineConfig::desk();
    cfg.train.resolution = 32;
    cfg.train.iters_decomp = 40;
    cfg.train.iters_diffusion = 40;
    cfg.train.iters_restore = 40;
    cfg.llc.schedule_test.steps = 10;
    cfg.train.seed = 9;
    let data = generate_samples(8, 32, 9).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_stages(&cfg, &data, a.path());
    let second = run_stages(&cfg, &data, b.path());
    let mut c = Checks::new();
    for (x, y) in first.iter().zip(&second) {
        let losses_same = x.losses.len() == y.losses.len()
            && x.losses
                .iter()
                .zip(&y.losses)
                .all(|(p, q)| p.to_bits() == q.to_bits());
        c.check(
            format!(
                "{}: rerun checkpoint sha256 {} and loss curve identical",
                x.kind,
                &x.sha256[..12]
            ),
            x.sha256 == y.sha256 && losses_same,
        );
    }

    let sample = generate_samples(1, 40, 99).unwrap().remove(0);
    let p1 = Pipeline::load(&CheckpointPaths::in_dir(a.path())).unwrap();
    let p2 = Pipeline::load(&CheckpointPaths::in_dir(b.path())).unwrap();
    let o1 = p1.run(&sample.shadow, &sample.mask, 5).unwrap();
    let o2 = p1.run(&sample.shadow, &sample.mask, 5).unwrap();
    let o3 = p2.run(&sample.shadow, &sample.mask, 5).unwrap();
    let bits = |i: &Image| i.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    c.check(
        "infer twice with one seed: bit-identical",
        bits(&o1.prediction) == bits(&o2.prediction),
    );
    c.check(
        "infer from the rerun checkpoints: bit-identical",
        bits(&o1.prediction) == bits(&o3.prediction) && bits(&o1.corrected) == bits(&o3.corrected),
    );
    let other = p1.run(&sample.shadow, &sample.mask, 6).unwrap();
    c.check(
        "another seed changes the corrected illumination",
        bits(&other.corrected) != bits(&o1.corrected),
    );
    c.finish(9, "fixed-seed determinism");
}
