//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary
//! (no libtest harness) so the lines always reach the console.

use std::time::{Duration, Instant};

use ndarray::{array, Array2};
use probssl::autodiff::{Tape, Var};
use probssl::batchstats::{EmbeddingBatch, CORR_EPS};
use probssl::config::RunConfig;
use probssl::data::{synth_multiview_dataset, Dataset, Splits, SynthSpec};
use probssl::evalprobe::{stochastic_sigma, train_probe, FinetuneConfig, ProbeConfig, ProbeSource};
use probssl::gaussdist::{
    kl_mc_var, kl_standard_normal, kl_standard_normal_var, kl_to_prior_mc, sample_reparam_var, standard_normal, DiagGaussianBatch,
    DistVars, MoGPrior, Prior, PriorVars,
};
use probssl::mi::{mine_train, GaussianPairs, MineConfig};
use probssl::models::{EncoderKind, InputLayout, Model, ModelConfig, PriorSpec, StageVars, Variant};
use probssl::objectives::{
    barlow_terms, barlow_terms_var, divergence_loss_var, mc_objective_var, vicreg_covariance_var, vicreg_invariance_var, vicreg_variance,
    vicreg_variance_var, LossCoefficients, Method, PosteriorDraws, ViewEmbedding,
};
use probssl::ood::{auroc, evaluate_detectors, random_scores, Detector, OodConfig};
use probssl::params::{load_checkpoint, save_checkpoint, Mode, ParamStore, Session};
use probssl::rng::stream;
use probssl::trainer::{metrics_csv, model_from_checkpoint, train, TrainOutcome};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn run(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = f();
    let took = t.elapsed();
    let in_budget = took <= budget;
    let ok = out.passed && in_budget;
    let timing = format!("{:.1}s of {}s", took.as_secs_f64(), budget.as_secs());
    let timing = if in_budget { timing } else { format!("{timing}, over budget") };
    println!("[{}] criterion {id:>2} {name}: {} ({timing})", if ok { "PASS" } else { "FAIL" }, out.detail);
    ok
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------------------
// independent finite-difference oracle

fn numeric_grad(x: &Array2<f64>, h: f64, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut p = x.clone();
        p[[r, c]] += h;
        let up = f(&p);
        p[[r, c]] -= 2.0 * h;
        let down = f(&p);
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

/// Worst relative error over every input of a scalar function built on the
/// tape from `inputs`.
fn check_tape_fn(inputs: &[Array2<f64>], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
    let out = build(&mut t, &vs);
    let g = t.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        // cube root of machine epsilon balances truncation against roundoff
        // on losses of order 100
        let numeric = numeric_grad(&inputs[which], f64::EPSILON.cbrt(), &|p| {
            let mut t = Tape::new();
            let vs: Vec<Var> = (0..inputs.len()).map(|i| t.constant(if i == which { p.clone() } else { inputs[i].clone() })).collect();
            let out = build(&mut t, &vs);
            t.scalar_value(out)
        });
        let analytic = g.get(vs[which]).cloned().unwrap_or_else(|| Array2::zeros(inputs[which].dim()));
        worst = worst.max(rel_err(&analytic, &numeric, 1e-6));
    }
    worst
}

fn posterior(t: &mut Tape, mu: Var, sigma: Var, noise: &[Array2<f64>]) -> PosteriorDraws {
    let dist = DistVars { mu, sigma };
    PosteriorDraws { dist, samples: noise.iter().map(|e| sample_reparam_var(t, dist, e)).collect() }
}

/// Worst relative error of every parameter gradient of `readout(model(x))`.
fn check_network(model: &Model, seed: u64, readout: &dyn Fn(&mut Session, &ParamStore, &Model) -> Var) -> f64 {
    let store = model.init_params(&mut stream(seed, &[1])).unwrap();
    let loss = |st: &ParamStore| -> (f64, ParamStore) {
        let mut st = st.clone();
        let mut s = Session::new(&st, Mode::Train, true);
        let l = readout(&mut s, &st, model);
        let v = s.tape.scalar_value(l);
        s.backward(l, &mut st).unwrap();
        (v, st)
    };
    let (_, with_grads) = loss(&store);
    let mut worst: f64 = 0.0;
    for name in store.names() {
        let p0 = store.value(name).unwrap().clone();
        let numeric = numeric_grad(&p0, 1e-6, &|p| {
            let mut st = store.clone();
            st.set_value(name, p.clone()).unwrap();
            loss(&st).0
        });
        // batch norm makes some gradients exactly zero; a 1e-3 floor keeps
        // their roundoff from counting as relative error
        worst = worst.max(rel_err(with_grads.grad(name).unwrap(), &numeric, 1e-3));
    }
    worst
}

fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Var {
    let w = standard_normal(t.shape(v), &mut stream(seed, &[9]));
    let w = t.constant(w);
    let p = t.mul(v, w);
    t.sum(p)
}

fn criterion_1() -> Outcome {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let (n, d) = (7, 5);
    for inst in 0..3u64 {
        let mut r = stream(100 + inst, &[]);
        let za = standard_normal((n, d), &mut r);
        let zb = &za + &(standard_normal((n, d), &mut r) * 0.5);
        let sa = standard_normal((n, d), &mut r).mapv(|v| 0.3 + 0.3 * v.abs());
        let sb = standard_normal((n, d), &mut r).mapv(|v| 0.3 + 0.3 * v.abs());
        let na: Vec<_> = (0..3).map(|_| standard_normal((n, d), &mut r)).collect();
        let nb: Vec<_> = (0..3).map(|_| standard_normal((n, d), &mut r)).collect();
        let means = standard_normal((3, d), &mut r) * 0.5;
        let sigmas = standard_normal((3, d), &mut r).mapv(|v| 0.6 + 0.3 * v.abs());
        let pair = [za.clone(), zb.clone()];
        let c = LossCoefficients { beta: 0.3, ..Default::default() };

        let mut push = |name: &str, e: f64| match worst.iter_mut().find(|(k, _)| k == name) {
            Some(w) => w.1 = w.1.max(e),
            None => worst.push((name.to_string(), e)),
        };
        push("barlow inv", check_tape_fn(&pair, &|t, v| barlow_terms_var(t, v[0], v[1], 0.005, CORR_EPS).unwrap().0));
        push("barlow reg", check_tape_fn(&pair, &|t, v| barlow_terms_var(t, v[0], v[1], 0.005, CORR_EPS).unwrap().1));
        push("vicreg inv", check_tape_fn(&pair, &|t, v| vicreg_invariance_var(t, v[0], v[1], 25.0).unwrap()));
        // scale so some stds sit below gamma and the hinge is active
        let small = [za.clone() * 0.5];
        push("vicreg var", check_tape_fn(&small, &|t, v| vicreg_variance_var(t, v[0], 1.0, 1e-4).unwrap()));
        push("vicreg cov", check_tape_fn(&pair[..1], &|t, v| vicreg_covariance_var(t, v[0]).unwrap()));
        let q = [za.clone(), sa.clone(), zb.clone(), sb.clone(), means.clone(), sigmas.clone()];
        push(
            "kl standard",
            check_tape_fn(&q[..2], &|t, v| {
                let kl = kl_standard_normal_var(t, DistVars { mu: v[0], sigma: v[1] });
                t.sum(kl)
            }),
        );
        push(
            "kl mog (mc)",
            check_tape_fn(&q, &|t, v| {
                let p = posterior(t, v[0], v[1], &na);
                let kl = kl_mc_var(t, p.dist, &p.samples, PriorVars::Mog { means: v[4], sigmas: v[5] }).unwrap();
                t.sum(kl)
            }),
        );
        push(
            "divergence",
            check_tape_fn(&q, &|t, v| {
                let a = posterior(t, v[0], v[1], &na);
                let b = posterior(t, v[2], v[3], &nb);
                divergence_loss_var(t, &a, &b, PriorVars::Mog { means: v[4], sigmas: v[5] }, 0.3).unwrap()
            }),
        );
        for method in [Method::Barlow, Method::Vicreg] {
            push(
                &format!("mc objective {}", method.name()),
                check_tape_fn(&q, &|t, v| {
                    let a = posterior(t, v[0], v[1], &na);
                    let b = posterior(t, v[2], v[3], &nb);
                    let ea = ViewEmbedding { z_samples: a.samples.clone(), posterior: Some(a) };
                    let eb = ViewEmbedding { z_samples: b.samples.clone(), posterior: Some(b) };
                    mc_objective_var(t, method, &c, PriorVars::Mog { means: v[4], sigmas: v[5] }, &ea, &eb).unwrap().total
                }),
            );
        }
    }

    let mlp = |variant, prior| {
        let cfg = ModelConfig { hidden_dim: 6, rep_dim: 4, proj_hidden: 5, proj_dim: 3, ..Default::default() };
        Model::new(cfg, InputLayout::Flat { dim: 5 }, variant, prior).unwrap()
    };
    let conv = |variant| {
        let cfg = ModelConfig { encoder: EncoderKind::Conv, rep_dim: 3, proj_hidden: 4, proj_dim: 3, conv_channels: vec![2, 2], ..Default::default() };
        Model::new(cfg, InputLayout::Image { channels: 1, height: 4, width: 4 }, variant, PriorSpec::StandardNormal).unwrap()
    };
    let input = |m: &Model, seed: u64| standard_normal((6, m.input.dim()), &mut stream(seed, &[2]));
    let mut nets: Vec<(String, f64)> = Vec::new();
    for (label, m) in [
        ("mlp", mlp(Variant::Hprob, PriorSpec::StandardNormal)),
        ("conv", conv(Variant::Hprob)),
    ] {
        let x = input(&m, 1);
        let e = check_network(&m, 1, &|s, st, m| {
            let xv = s.tape.constant(x.clone());
            match m.encoder_var(s, st, xv).unwrap() {
                StageVars::Dist(dv) => {
                    let a = weighted_sum(&mut s.tape, dv.mu, 1);
                    let b = weighted_sum(&mut s.tape, dv.sigma, 2);
                    s.tape.add(a, b)
                }
                StageVars::Point(p) => weighted_sum(&mut s.tape, p, 1),
            }
        });
        nets.push((format!("encoder {label}"), e));
    }
    {
        let m = mlp(Variant::Zprob, PriorSpec::StandardNormal);
        let h = standard_normal((6, 4), &mut stream(3, &[2]));
        let e = check_network(&m, 2, &|s, st, m| {
            let hv = s.tape.constant(h.clone());
            match m.projector_var(s, st, hv).unwrap() {
                StageVars::Dist(dv) => {
                    let a = weighted_sum(&mut s.tape, dv.mu, 3);
                    let b = weighted_sum(&mut s.tape, dv.sigma, 4);
                    s.tape.add(a, b)
                }
                StageVars::Point(p) => weighted_sum(&mut s.tape, p, 3),
            }
        });
        nets.push(("projector".into(), e));
    }
    let pipelines = [
        ("deterministic barlow", mlp(Variant::Deterministic, PriorSpec::StandardNormal), Method::Barlow),
        ("zprob vicreg mog", mlp(Variant::Zprob, PriorSpec::Mog { components: 2 }), Method::Vicreg),
        ("hprob barlow", mlp(Variant::Hprob, PriorSpec::StandardNormal), Method::Barlow),
        ("hprob vicreg mog", mlp(Variant::Hprob, PriorSpec::Mog { components: 3 }), Method::Vicreg),
        ("conv zprob barlow", conv(Variant::Zprob), Method::Barlow),
    ];
    for (i, (label, m, method)) in pipelines.iter().enumerate() {
        let xa = input(m, 10 + i as u64);
        let xb = &xa + &(input(m, 20 + i as u64) * 0.3);
        let na = m.draw_noise(6, 2, &mut stream(30 + i as u64, &[]));
        let nb = m.draw_noise(6, 2, &mut stream(40 + i as u64, &[]));
        let e = check_network(m, 5 + i as u64, &|s, st, m| {
            let a = s.tape.constant(xa.clone());
            let b = s.tape.constant(xb.clone());
            let fa = m.pipeline_var(s, st, a, &na).unwrap();
            let fb = m.pipeline_var(s, st, b, &nb).unwrap();
            let prior = m.prior_vars(s, st).unwrap();
            let c = LossCoefficients { beta: 0.2, ..Default::default() };
            mc_objective_var(&mut s.tape, *method, &c, prior, &fa.view_embedding(), &fb.view_embedding()).unwrap().total
        });
        nets.push((format!("pipeline {label}"), e));
    }
    worst.extend(nets);
    let bad: Vec<_> = worst.iter().filter(|(_, e)| !(*e < 1e-4)).collect();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Outcome {
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("{} checks, worst relative error {max:.2e} < 1e-4", worst.len())
        } else {
            format!("failing: {bad:?}")
        },
    }
}

fn criterion_2() -> Outcome {
    let mut r = stream(200, &[]);
    let d = 4;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let mu = standard_normal((1, d), &mut r) * 0.8;
        let sigma = Array2::from_shape_simple_fn((1, d), || r.random_range(0.4..1.8));
        let closed = kl_standard_normal(&DiagGaussianBatch::new(mu.clone(), sigma.clone()).unwrap())[0];
        // oracle: mean of log q(z) - log p(z) over 1e5 draws z ~ q
        let m = 100_000;
        let mut acc = 0.0;
        for _ in 0..m {
            let mut log_ratio = 0.0;
            for j in 0..d {
                let e: f64 = r.sample(rand_distr::StandardNormal);
                let z = mu[[0, j]] + sigma[[0, j]] * e;
                log_ratio += -sigma[[0, j]].ln() - 0.5 * e * e + 0.5 * z * z;
            }
            acc += log_ratio;
        }
        let mc = acc / m as f64;
        worst_rel = worst_rel.max((mc - closed).abs() / closed);
    }

    // mixture whose components are all N(0, I): the MC estimate must agree
    // with the closed form up to its own standard error
    let q = DiagGaussianBatch::new(array![[0.4, -0.7, 0.1]], array![[0.6, 1.3, 0.9]]).unwrap();
    let closed = kl_standard_normal(&q)[0];
    let k = 4000;
    let noise: Vec<_> = (0..k).map(|_| q.draw_noise(&mut r)).collect();
    let mog = Prior::Mog(MoGPrior::standard(5, 3));
    let est = kl_to_prior_mc(&q, &mog, &noise).unwrap()[0];
    let per_draw: Vec<f64> = noise.iter().map(|e| kl_to_prior_mc(&q, &mog, std::slice::from_ref(e)).unwrap()[0]).collect();
    let mean = per_draw.iter().sum::<f64>() / k as f64;
    let se = (per_draw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0)).sqrt() / (k as f64).sqrt();
    let mog_ok = (est - closed).abs() <= 3.0 * se;
    Outcome {
        passed: worst_rel < 0.01 && mog_ok,
        detail: format!(
            "closed form vs 1e5-draw MC worst rel {:.3}% (< 1%); MoG(N(0,1)) MC {est:.4} vs {closed:.4}, |diff| {:.4} <= 3 SE {:.4}",
            worst_rel * 100.0,
            (est - closed).abs(),
            3.0 * se
        ),
    }
}

fn synth(center_scale: f64) -> Splits {
    synth_multiview_dataset(&SynthSpec { center_scale, ..Default::default() }, 0).unwrap()
}

fn small_run(method: Method, variant: Variant, seed: u64, beta: f64, k: usize, epochs: usize) -> RunConfig {
    let mut c = RunConfig::new(method, variant, seed);
    c.model = ModelConfig { hidden_dim: 64, rep_dim: 32, proj_hidden: 32, proj_dim: 32, ..Default::default() };
    c.loss.beta = beta;
    c.loss.mc_samples = k;
    c.schedule.epochs = epochs;
    c.schedule.warmup_epochs = 1;
    c.schedule.steps_per_epoch = Some(100);
    c.data = probssl::data::DataSpec::Synthetic(SynthSpec { center_scale: 0.5, ..Default::default() });
    c
}

fn criterion_3() -> Outcome {
    // centred, orthogonal, equal-norm columns give R = I exactly
    let z = EmbeddingBatch::new(array![[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]]).unwrap();
    let (inv, reg) = barlow_terms(&z, &z, &LossCoefficients::default()).unwrap();
    let wide = EmbeddingBatch::new(z.as_array() * 1.5).unwrap();
    let var = vicreg_variance(&wide, 1.0, 1e-4).unwrap();
    let at_gamma = vicreg_variance(&EmbeddingBatch::new(z.as_array() * (0.75f64).sqrt()).unwrap(), 1.0, 0.0).unwrap();

    let data = synth(0.5);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for method in [Method::Barlow, Method::Vicreg] {
        for variant in [Variant::Deterministic, Variant::Zprob, Variant::Hprob] {
            let mut c = small_run(method, variant, 1, 1e-2, 3, 2);
            c.schedule.steps_per_epoch = Some(10);
            let out = train(&c, &data.train).unwrap();
            for row in &out.history {
                let l = &row.loss;
                worst = worst.max((l.total - (l.inv + l.reg + l.div)).abs());
                steps += 1;
            }
        }
    }
    let ok = inv.abs() < 1e-12 && reg.abs() < 1e-12 && var == 0.0 && at_gamma.abs() < 1e-12 && worst <= 1e-10;
    Outcome {
        passed: ok,
        detail: format!(
            "R=I: inv {inv:.1e}, reg {reg:.1e}; VICReg variance at std 1.5: {var}, at std 1: {at_gamma:.1e}; max |total-(inv+reg+div)| {worst:.1e} over {steps} steps"
        ),
    }
}

fn criterion_4() -> Outcome {
    let mut r = stream(400, &[]);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n_in = r.random_range(1..12);
        let n_out = r.random_range(1..12);
        // few distinct values so ties are common
        let levels = r.random_range(2..6);
        let a: Vec<f64> = (0..n_in).map(|_| r.random_range(0..levels) as f64 * 0.5).collect();
        let b: Vec<f64> = (0..n_out).map(|_| r.random_range(0..levels) as f64 * 0.5).collect();
        let mut twice = 0u64;
        for &x in &a {
            for &y in &b {
                twice += if y > x { 2 } else if y == x { 1 } else { 0 };
            }
        }
        let brute = twice as f64 / (2 * n_in * n_out) as f64;
        if auroc(&a, &b).unwrap() != brute {
            mismatches += 1;
        }
    }
    Outcome { passed: mismatches == 0, detail: format!("{mismatches} of 200 tie-heavy score sets differ from pairwise counting") }
}

fn criterion_5() -> Outcome {
    let truth = |rho: f64| -0.5 * (1.0 - rho * rho).ln();
    let rhos = [0.0, 0.5, 0.8];
    let expected = [0.0, 0.1438, 0.5108];
    let mut ok = rhos.iter().zip(expected).all(|(&r, e)| (truth(r) - e).abs() < 5e-5);
    let mut lines = Vec::new();
    for seed in 1..=3u64 {
        let mut est = Vec::new();
        for (i, &rho) in rhos.iter().enumerate() {
            let cfg = MineConfig { hidden: 64, steps: 3000, batch_size: 256, lr: 1e-3, seed, ..Default::default() };
            let mut src = GaussianPairs::new(1, rho, seed * 10 + i as u64).unwrap();
            let v = mine_train(&mut src, "gauss", &cfg).unwrap().value;
            let within = if expected[i] == 0.0 { v.abs() <= 0.05 } else { (v - expected[i]).abs() <= 0.2 * expected[i] };
            ok &= within;
            est.push(v);
        }
        ok &= est[0] < est[1] && est[1] < est[2];
        lines.push(format!("seed {seed}: {:.3}/{:.3}/{:.3}", est[0], est[1], est[2]));
    }
    Outcome { passed: ok, detail: format!("targets 0/0.1438/0.5108; {}", lines.join(", ")) }
}

fn embedding_std(model: &Model, store: &ParamStore, x: &Array2<f64>) -> f64 {
    let out = model.pipeline_forward(store, x, &[], Mode::Train).unwrap();
    let z = out.z_point().unwrap().as_array();
    let n = z.nrows() as f64;
    z.columns()
        .into_iter()
        .map(|c| {
            let m = c.sum() / n;
            (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .sum::<f64>()
        / z.ncols() as f64
}

fn collapse_ratio(c: &RunConfig, data: &Dataset, test: &Array2<f64>) -> f64 {
    let out = train(c, data).unwrap();
    let init = out.model.init_params(&mut stream(c.seed, &[probssl::rng::tag::INIT])).unwrap();
    embedding_std(&out.model, &out.store, test) / embedding_std(&out.model, &init, test)
}

fn criterion_6() -> Outcome {
    let data = synth(0.5);
    let base = |method| {
        let mut c = RunConfig::new(method, Variant::Deterministic, 1);
        c.schedule.epochs = 5;
        c.schedule.warmup_epochs = 1;
        c.schedule.steps_per_epoch = Some(100);
        c
    };
    let mut off = base(Method::Vicreg);
    off.loss.tau = 0.0;
    off.loss.nu = 0.0;
    off.loss.lambda_bt = 0.0;
    let zeroed = collapse_ratio(&off, &data.train, &data.test.x);
    let default = collapse_ratio(&base(Method::Vicreg), &data.train, &data.test.x);
    let mut b_off = base(Method::Barlow);
    b_off.loss.lambda_bt = 0.0;
    let barlow = collapse_ratio(&b_off, &data.train, &data.test.x);
    Outcome {
        passed: zeroed < 0.1 && default >= 0.1,
        detail: format!(
            "VICReg per-dim z std / initial after 500 steps: regularizers off {zeroed:.3} (< 0.1), defaults {default:.3} (>= 0.1); info: Barlow lambda=0 {barlow:.3}"
        ),
    }
}

fn mean_sigma(out: &TrainOutcome, x: &Array2<f64>) -> f64 {
    let s = stochastic_sigma(&out.model, &out.store, x).unwrap();
    s.mean().unwrap()
}

fn criterion_7() -> Outcome {
    let data = synth(0.5);
    let grids = [
        (Method::Barlow, Variant::Hprob, [1e-4, 1e-3, 1e-2]),
        (Method::Barlow, Variant::Zprob, [1e-3, 1e-2, 1e-1]),
        (Method::Vicreg, Variant::Hprob, [1e-5, 1e-4, 1e-3]),
        (Method::Vicreg, Variant::Zprob, [1e-5, 1e-4, 1e-3]),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (method, variant, betas) in grids {
        let mut monotone = 0;
        let mut means = [0.0; 3];
        for seed in 1..=3u64 {
            let s: Vec<f64> = betas
                .iter()
                .map(|&b| mean_sigma(&train(&small_run(method, variant, seed, b, 12, 5), &data.train).unwrap(), &data.test.x))
                .collect();
            monotone += usize::from(s[0] <= s[1] && s[1] <= s[2]);
            means.iter_mut().zip(&s).for_each(|(m, v)| *m += v / 3.0);
        }
        ok &= monotone >= 2;
        parts.push(format!(
            "{} {}: {monotone}/3 seeds monotone, mean sigma {:.4}/{:.4}/{:.4}",
            method.name(),
            variant.name(),
            means[0],
            means[1],
            means[2]
        ));
    }
    Outcome { passed: ok, detail: parts.join("; ") }
}

fn probe_accuracy(out: &TrainOutcome, data: &Splits, seed: u64) -> f64 {
    let pc = ProbeConfig { seed, ..Default::default() };
    let src = ProbeSource::Model { model: &out.model, store: &out.store };
    train_probe(src, &data.train, &data.test, &pc, &FinetuneConfig::default(), true).unwrap().0.accuracy
}

/// Mean probe accuracy over seeds 1..=3 for one setting, keeping the seed-1
/// run for reuse.
fn three_seed_accuracy(data: &Splits, method: Method, variant: Variant, beta: f64, k: usize) -> (f64, TrainOutcome) {
    let mut acc = 0.0;
    let mut first = None;
    for seed in 1..=3u64 {
        let out = train(&small_run(method, variant, seed, beta, k, 10), &data.train).unwrap();
        acc += probe_accuracy(&out, data, seed) / 3.0;
        if seed == 1 {
            first = Some(out);
        }
    }
    (acc, first.unwrap())
}

struct VariantRuns {
    deterministic: Vec<TrainOutcome>,
    stochastic: Vec<(String, TrainOutcome)>,
}

fn criterion_8(data: &Splits, keep: &mut VariantRuns) -> Outcome {
    // per-variant beta: the best-performing grid value under the N(0,1) prior
    let settings = [(Method::Barlow, 1e-2, 1e-3), (Method::Vicreg, 1e-5, 1e-5)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (method, beta_z, beta_h) in settings {
        let (det, d_run) = three_seed_accuracy(data, method, Variant::Deterministic, 0.0, 12);
        let (z, z_run) = three_seed_accuracy(data, method, Variant::Zprob, beta_z, 12);
        let (h, h_run) = three_seed_accuracy(data, method, Variant::Hprob, beta_h, 12);
        let pass = det >= z - 0.02 && h <= z;
        ok &= pass;
        parts.push(format!(
            "{}: det {det:.4}, Z {z:.4} (beta {beta_z:e}), H {h:.4} (beta {beta_h:e}) -> {}",
            method.name(),
            if pass { "holds" } else { "does not hold" }
        ));
        keep.deterministic.push(d_run);
        keep.stochastic.push((format!("{} zprob", method.name()), z_run));
        keep.stochastic.push((format!("{} hprob", method.name()), h_run));
    }
    Outcome { passed: ok, detail: parts.join("; ") }
}

fn criterion_9(data: &Splits, runs: &VariantRuns) -> Outcome {
    let ood = data.ood.as_ref().expect("synthetic data has an OOD split");
    let cfg = OodConfig::default();
    // the judged checkpoint is fixed up front; the others are reported only
    let designated = "barlow zprob";
    let mut judged = 0.0f64;
    let mut parts = Vec::new();
    for (label, out) in &runs.stochastic {
        let res = evaluate_detectors(&out.model, &out.store, None, &data.train.x, &data.test.x, &ood.x, &cfg).unwrap();
        let get = |d| res.iter().find(|r| r.detector == d).and_then(|r| r.auroc).unwrap();
        let (m, s) = (get(Detector::SigmaMean), get(Detector::SigmaStd));
        parts.push(format!("{label} SigmaMean {m:.3} SigmaStd {s:.3}"));
        if label == designated {
            judged = m.max(s);
        }
    }
    let mut r = stream(900, &[]);
    let rand_in = random_scores(data.test.len(), &mut r);
    let rand_out = random_scores(ood.len(), &mut r);
    let random = auroc(&rand_in.scores, &rand_out.scores).unwrap();
    let det = &runs.deterministic[0];
    let res = evaluate_detectors(&det.model, &det.store, None, &data.train.x, &data.test.x, &ood.x, &cfg).unwrap();
    let na = res.iter().filter(|r| matches!(r.detector, Detector::SigmaMean | Detector::SigmaStd)).all(|r| r.auroc.is_none());
    Outcome {
        passed: judged >= 0.70 && (random - 0.5).abs() <= 0.05 && na,
        detail: format!(
            "{designated} seed 1 best sigma AUROC {judged:.3} (>= 0.70); random baseline {random:.3}; deterministic sigma detectors N/A: {na}; all: {}",
            parts.join(", ")
        ),
    }
}

fn criterion_10(data: &Splits) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (method, beta) in [(Method::Barlow, 1e-2), (Method::Vicreg, 1e-3)] {
        let (k1, _) = three_seed_accuracy(data, method, Variant::Hprob, beta, 1);
        let (k12, _) = three_seed_accuracy(data, method, Variant::Hprob, beta, 12);
        ok &= k12 >= k1;
        parts.push(format!("{} H-prob beta {beta:e}: K=1 {k1:.4}, K=12 {k12:.4}", method.name()));
    }
    Outcome { passed: ok, detail: parts.join("; ") }
}

fn criterion_11() -> Outcome {
    let data = synth(0.5);
    let mut ok = true;
    let mut parts = Vec::new();
    for variant in [Variant::Deterministic, Variant::Zprob, Variant::Hprob] {
        let mut c = small_run(Method::Vicreg, variant, 4, 1e-3, 3, 2);
        c.schedule.steps_per_epoch = Some(20);
        let a = train(&c, &data.train).unwrap();
        let b = train(&c, &data.train).unwrap();
        let same = metrics_csv(&a.history).unwrap() == metrics_csv(&b.history).unwrap();
        let other = train(&RunConfig { seed: 5, ..c.clone() }, &data.train).unwrap();
        let differs = metrics_csv(&other.history).unwrap() != metrics_csv(&a.history).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &a.checkpoint(&c)).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        let bits = |s: &ParamStore| -> Vec<u64> {
            s.iter().flat_map(|(_, p)| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).chain(s.buffers().flat_map(|(_, b)| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>())).collect()
        };
        let exact = bits(&back.store) == bits(&a.store) && back.optim.as_ref() == Some(&a.optim);
        let (cfg_back, model) = model_from_checkpoint(&back).unwrap();
        let x = data.test.x.slice(ndarray::s![0..16, ..]).to_owned();
        let e1 = model.encode_batched(&back.store, &x, 8).unwrap();
        let e0 = a.model.encode_batched(&a.store, &x, 8).unwrap();
        let same_forward = e1.mean() == e0.mean() && cfg_back == c;
        ok &= same && differs && exact && same_forward;
        parts.push(format!("{}: csv identical {same}, seed-sensitive {differs}, checkpoint bit-exact {exact}, forward identical {same_forward}", variant.name()));
    }
    Outcome { passed: ok, detail: parts.join("; ") }
}

fn main() {
    // libtest flags (e.g. --nocapture from `cargo test -- ...`) are ignored
    let mut results = Vec::new();
    results.push(run(1, "gradient suite", secs(60), criterion_1));
    results.push(run(2, "closed-form KL", secs(60), criterion_2));
    results.push(run(3, "loss identities", secs(60), criterion_3));
    results.push(run(4, "AUROC oracle", secs(10), criterion_4));
    results.push(run(5, "MINE analytic recovery", secs(300), criterion_5));
    results.push(run(6, "collapse control", secs(300), criterion_6));
    results.push(run(7, "beta-variance trend", secs(1200), criterion_7));
    let data = synth(0.5);
    let mut runs = VariantRuns { deterministic: Vec::new(), stochastic: Vec::new() };
    results.push(run(8, "variant ordering trend", secs(1800), || criterion_8(&data, &mut runs)));
    results.push(run(9, "sigma-detector efficacy", secs(600), || criterion_9(&data, &runs)));
    results.push(run(10, "MC-sample effect", secs(1800), || criterion_10(&data)));
    results.push(run(11, "determinism and persistence", secs(300), criterion_11));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
