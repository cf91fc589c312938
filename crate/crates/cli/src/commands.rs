use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use prefdiff_core::diffusion::{ddpm_sample, load_checkpoint, save_checkpoint, DenoiserNet, NoiseSchedule};
use prefdiff_core::experiments::{
    align as align_run, density_trace, evaluate_reward, gen_pairs as gen_on_policy, gen_unlike_pairs, iterative_align,
    pretrain as pretrain_run, read_pairs_csv, weight_curve, write_pairs_csv, write_rounds_csv, write_weight_curve_csv,
    DensityTrace, PreferencePair, RunConfig,
};
use prefdiff_core::flow_sde::{
    sde_sample as sde_run, train_denoiser, Denoiser, EtaNet, EtaTrainConfig, GaussianDenoiser, Interpolant,
    LinearInterpolant, PathTrace, TrigInterpolant,
};
use prefdiff_core::numerics::DenseArray;
use prefdiff_core::rng::{self, Rng};
use prefdiff_core::Error;

use crate::{Common, Diagnostic, Failure, MethodArgs};

/// Independent random streams, split off the seed in a fixed order so that
/// skipping a stage never shifts the draws of another.
struct Streams {
    pretrain: Rng,
    pairs: Rng,
    train: Rng,
    eval: Rng,
    diagnose: Rng,
    sde: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut root = rng::seeded(seed);
        Self {
            pretrain: rng::fork(&mut root, 1),
            pairs: rng::fork(&mut root, 2),
            train: rng::fork(&mut root, 3),
            eval: rng::fork(&mut root, 4),
            diagnose: rng::fork(&mut root, 5),
            sde: rng::fork(&mut root, 6),
        }
    }
}

/// Output directory plus its `run.log`.
struct Run {
    id: String,
    dir: PathBuf,
    log: BufWriter<File>,
    cfg: RunConfig,
    sched: NoiseSchedule,
    streams: Streams,
}

impl Run {
    /// Loads and validates the config (with any overrides applied) before
    /// touching the output directory.
    fn open(common: &Common, name: &str, adjust: impl FnOnce(&mut RunConfig)) -> Result<Self, Failure> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Failure::from(Error::config("config", format!("{}: {io}", p.display()))),
                other => other.into(),
            })?,
            None => RunConfig::default(),
        };
        adjust(&mut cfg);
        cfg.validate()?;
        let sched = cfg.schedule()?;
        fs::create_dir_all(&common.out)?;
        fs::write(common.out.join("config.toml"), cfg.to_toml_string())?;
        let mut log = BufWriter::new(File::create(common.out.join("run.log"))?);
        writeln!(log, "command {name}")?;
        writeln!(log, "seed {}", common.seed)?;
        Ok(Self {
            id: format!("{name}-s{}", common.seed),
            dir: common.out.clone(),
            log,
            cfg,
            sched,
            streams: Streams::new(common.seed),
        })
    }

    fn log_path(&self) -> PathBuf {
        self.dir.join("run.log")
    }

    fn note(&mut self, line: impl AsRef<str>) -> Result<(), Failure> {
        writeln!(self.log, "{}", line.as_ref())?;
        self.log.flush()?;
        Ok(())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn fail(&mut self, f: Failure) -> Failure {
        let _ = self.note(format!("failed: {}", f.line_msg()));
        f.with_log(self.log_path())
    }

    /// Runs `body`, noting any failure in `run.log`.
    fn guarded(mut self, body: impl FnOnce(&mut Run) -> Result<(), Failure>) -> Result<(), Failure> {
        match body(&mut self) {
            Ok(()) => self.note("done"),
            Err(f) => Err(self.fail(f)),
        }
    }

    /// Loads a checkpoint that must fit the configured target and schedule,
    /// or pretrains a fresh network and saves it as `save_as`.
    fn network(&mut self, checkpoint: Option<&Path>, save_as: &str) -> Result<DenoiserNet, Failure> {
        let want = self.cfg.net_config()?;
        if let Some(p) = checkpoint {
            let net = load_checkpoint(p)?;
            let have = net.config();
            if have.data_dim != want.data_dim || have.n_conditions != want.n_conditions || have.steps != want.steps {
                return Err(Error::config(
                    "checkpoint",
                    format!("{} does not match the configured target and schedule", p.display()),
                )
                .into());
            }
            self.note(format!("loaded {} ({})", p.display(), net.fingerprint()))?;
            return Ok(net);
        }
        let mut net = DenoiserNet::new(want, &mut self.streams.pretrain)?;
        let losses = pretrain_run(
            &mut net,
            &self.cfg.target,
            &self.cfg.pretrain_config(),
            &self.sched,
            &mut self.streams.pretrain,
        )?;
        let mut w = csv::Writer::from_writer(self.create("pretrain.csv")?);
        w.write_record(["run_id", "step", "loss"]).map_err(Error::from)?;
        for (k, l) in losses.iter().enumerate() {
            w.write_record([self.id.clone(), (k + 1).to_string(), l.to_string()]).map_err(Error::from)?;
        }
        w.flush()?;
        save_checkpoint(&net, &self.dir.join(save_as))?;
        let last = losses.last().copied().unwrap_or(f64::NAN);
        self.note(format!("pretrained steps={} final_loss={last} saved={save_as}", losses.len()))?;
        Ok(net)
    }

    fn pairs_from(&mut self, path: Option<&Path>, net: &DenoiserNet, unlike: bool, n: usize) -> Result<Vec<PreferencePair>, Failure> {
        if let Some(p) = path {
            let pairs = read_pairs_csv(File::open(p)?)?;
            if pairs.is_empty() {
                return Err(Failure::runtime(format!("{} holds no pairs", p.display())));
            }
            self.note(format!("read {} pairs from {}", pairs.len(), p.display()))?;
            return Ok(pairs);
        }
        let rng = &mut self.streams.pairs;
        let pairs = if unlike {
            gen_unlike_pairs(&self.cfg.target, net, n, &self.sched, rng)?
        } else {
            gen_on_policy(net, &self.cfg.target, n, &self.sched, rng)?
        };
        write_pairs_csv(&pairs, self.create("pairs.csv")?)?;
        self.note(format!("generated {} {} pairs", pairs.len(), if unlike { "unlike" } else { "on-policy" }))?;
        Ok(pairs)
    }

    fn reward(&self, net: &DenoiserNet) -> Result<f64, Failure> {
        // Every evaluation replays the same stream, so rewards differ only
        // through the network.
        let mut r = self.streams.eval.clone();
        Ok(evaluate_reward(net, &self.cfg.target, self.cfg.align.eval_samples, &self.sched, &mut r)?)
    }
}

impl Failure {
    fn line_msg(&self) -> String {
        self.msg.replace(['\n', '\r'], " ")
    }
}

fn method_overrides(args: &MethodArgs) -> impl FnOnce(&mut RunConfig) + '_ {
    move |cfg: &mut RunConfig| {
        if let Some(m) = &args.method {
            cfg.method = m.clone();
        }
        if let Some(b) = args.beta {
            cfg.loss.beta = Some(b);
        }
    }
}

pub fn pretrain(common: &Common) -> Result<(), Failure> {
    Run::open(common, "pretrain", |_| {})?.guarded(|run| {
        run.network(None, "model.ckpt")?;
        Ok(())
    })
}

pub fn gen_pairs(common: &Common, checkpoint: Option<&Path>, unlike: bool, n: Option<usize>) -> Result<(), Failure> {
    Run::open(common, "gen-pairs", |cfg| {
        if let Some(n) = n {
            cfg.pairs.n = n;
        }
        cfg.pairs.unlike |= unlike;
    })?
    .guarded(|run| {
        let net = run.network(checkpoint, "model.ckpt")?;
        let (unlike, n) = (run.cfg.pairs.unlike, run.cfg.pairs.n);
        run.pairs_from(None, &net, unlike, n)?;
        Ok(())
    })
}

pub fn align(common: &Common, margs: &MethodArgs, checkpoint: Option<&Path>, pairs: Option<&Path>) -> Result<(), Failure> {
    let mut run = Run::open(common, "align", method_overrides(margs))?;
    let method = run.cfg.method()?;
    run.id = format!("align-{}-s{}", method.name(), common.seed);
    run.guarded(|run| {
        let reference = run.network(checkpoint, "ref.ckpt")?;
        let (unlike, n) = (run.cfg.pairs.unlike, run.cfg.pairs.n);
        let pairs = run.pairs_from(pairs, &reference, unlike, n)?;
        let acfg = run.cfg.align_config(method)?;
        let mut net = reference.clone();
        let baseline = run.reward(&reference)?;
        let outcome = match align_run(&mut net, &reference, &pairs, &acfg, &run.sched, &run.id, &mut run.streams.train) {
            Ok(o) => o,
            Err(Error::Diverged { step, t, report }) => {
                report.write_csv(run.create("weights.csv")?)?;
                return Err(Error::Diverged { step, t, report }.into());
            }
            Err(e) => return Err(e.into()),
        };
        outcome.log.write_csv(run.create("training_log.csv")?)?;
        outcome.weights.write_csv(run.create("weights.csv")?)?;
        outcome.density.write_csv(run.create("density.csv")?)?;
        save_checkpoint(&net, &run.dir.join("model.ckpt"))?;
        let final_reward = run.reward(&net)?;
        let mut w = csv::Writer::from_writer(run.create("rewards.csv")?);
        w.write_record(["run_id", "stage", "mean_reward"]).map_err(Error::from)?;
        w.write_record([run.id.as_str(), "baseline", &baseline.to_string()]).map_err(Error::from)?;
        w.write_record([run.id.as_str(), "final", &final_reward.to_string()]).map_err(Error::from)?;
        w.flush()?;
        let last = outcome.log.rows.last().map_or(f64::NAN, |r| r.loss);
        run.note(format!(
            "aligned method={} beta={} steps={} final_loss={last} reward {baseline} -> {final_reward}",
            method.name(),
            acfg.loss.beta,
            acfg.steps
        ))
    })
}

pub fn iterate(common: &Common, margs: &MethodArgs, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let mut run = Run::open(common, "iterate", method_overrides(margs))?;
    let method = run.cfg.method()?;
    run.id = format!("iterate-{}-s{}", method.name(), common.seed);
    run.guarded(|run| {
        let reference = run.network(checkpoint, "ref.ckpt")?;
        let acfg = run.cfg.align_config(method)?;
        let icfg = run.cfg.iterate_config();
        let mut net = reference.clone();
        let rounds = iterative_align(
            &mut net,
            &reference,
            &run.cfg.target,
            &icfg,
            &acfg,
            &run.sched,
            &run.id,
            &mut run.streams.train,
        )?;
        write_rounds_csv(&run.id, &rounds, run.create("rounds.csv")?)?;
        save_checkpoint(&net, &run.dir.join("model.ckpt"))?;
        for r in &rounds {
            run.note(format!("round {} mean_reward={}", r.round, r.mean_reward))?;
        }
        Ok(())
    })
}

pub fn diagnose(
    common: &Common,
    what: Diagnostic,
    checkpoint: Option<&Path>,
    reference: Option<&Path>,
    pairs: Option<&Path>,
) -> Result<(), Failure> {
    let name = match what {
        Diagnostic::WeightCurve => "diagnose-weight-curve",
        Diagnostic::Density => "diagnose-density",
    };
    Run::open(common, name, |_| {})?.guarded(|run| {
        let model = run.network(checkpoint, "model.ckpt")?;
        match what {
            Diagnostic::WeightCurve => {
                let (x0, conds) = match pairs {
                    Some(p) => {
                        let pairs = run.pairs_from(Some(p), &model, false, 0)?;
                        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.x0_w.clone()).collect();
                        (DenseArray::from_rows(&rows)?, pairs.iter().map(|p| p.cond).collect::<Vec<_>>())
                    }
                    None => {
                        let rng = &mut run.streams.pairs;
                        let conds = run.cfg.target.sample_conditions(run.cfg.diagnose.samples, rng);
                        (ddpm_sample(&model, &conds, &run.sched, rng)?, conds)
                    }
                };
                let bins = weight_curve(&model, &x0, &conds, &run.sched, run.cfg.diagnose.bins, &mut run.streams.diagnose)?;
                write_weight_curve_csv(&run.id, &bins, run.create("weight_curve.csv")?)?;
                run.note(format!("weight curve over {} samples in {} bins", x0.rows(), bins.len()))
            }
            Diagnostic::Density => {
                let reference = match reference {
                    Some(p) => run.network(Some(p), "")?,
                    None => model.clone(),
                };
                let n = run.cfg.diagnose.samples;
                let pairs = run.pairs_from(pairs, &reference, run.cfg.pairs.unlike, n)?;
                let mut trace = DensityTrace::new(run.id.clone());
                for w in run.cfg.align.density_windows.clone() {
                    trace.rows.push(density_trace(&model, &reference, &pairs, w[0], w[1], &run.sched, &mut run.streams.diagnose)?);
                }
                trace.write_csv(run.create("density.csv")?)?;
                run.note(format!("density over {} pairs in {} windows", pairs.len(), trace.rows.len()))
            }
        }
    })
}

pub fn sde_sample(common: &Common, epsilon: Option<f64>) -> Result<(), Failure> {
    Run::open(common, "sde-sample", |cfg| {
        if let Some(e) = epsilon {
            cfg.sde.epsilon = e;
        }
    })?
    .guarded(|run| {
        let eps = run.cfg.sde.epsilon;
        match run.cfg.sde.interpolant.as_str() {
            "trig" => sde_with(run, TrigInterpolant { epsilon: eps }),
            _ => sde_with(run, LinearInterpolant { epsilon: eps }),
        }
    })
}

fn sde_with<I: Interpolant + Copy>(run: &mut Run, interp: I) -> Result<(), Failure> {
    let dim = run.cfg.target.dim();
    let sde_cfg = run.cfg.sde_config()?;
    let s = run.cfg.sde.clone();
    let (eta, data): (Box<dyn Denoiser>, DenseArray) = if s.data == "target" {
        let rng = &mut run.streams.sde;
        let data = run.cfg.target.sample(4000, rng);
        let mut net = EtaNet::new(dim, s.hidden, 2, rng)?;
        let tcfg = EtaTrainConfig {
            steps: s.train_steps,
            ..EtaTrainConfig::default()
        };
        let losses = train_denoiser(&mut net, &data, &interp, &tcfg, rng)?;
        let mut w = csv::Writer::from_writer(run.create("eta_loss.csv")?);
        w.write_record(["run_id", "step", "loss"]).map_err(Error::from)?;
        for (k, l) in losses.iter().enumerate() {
            w.write_record([run.id.clone(), (k + 1).to_string(), l.to_string()]).map_err(Error::from)?;
        }
        w.flush()?;
        run.note(format!("trained denoiser steps={}", losses.len()))?;
        (Box::new(net), data)
    } else {
        let data = rng::normal_array(&mut run.streams.diagnose, &[4000, dim]);
        (Box::new(GaussianDenoiser { dim, interpolant: interp }), data)
    };
    let mut trace = PathTrace::new(s.trace_paths);
    let x = sde_run(eta.as_ref(), &interp, &sde_cfg, s.paths, &mut run.streams.sde, Some(&mut trace))?;
    trace.write_csv(&run.id, dim, run.create("paths.csv")?)?;

    let mut w = csv::Writer::from_writer(run.create("samples.csv")?);
    let mut header = vec!["run_id".to_string(), "path_id".into()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(Error::from)?;
    for i in 0..x.rows() {
        let mut rec = vec![run.id.clone(), i.to_string()];
        rec.extend(x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(Error::from)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(run.create("moments.csv")?);
    w.write_record(["run_id", "coord", "mean", "var", "data_mean", "data_var"]).map_err(Error::from)?;
    for j in 0..dim {
        let (m, v) = column_moments(&x, j);
        let (dm, dv) = column_moments(&data, j);
        w.write_record([run.id.clone(), j.to_string(), m.to_string(), v.to_string(), dm.to_string(), dv.to_string()])
            .map_err(Error::from)?;
    }
    w.flush()?;
    run.note(format!(
        "sde paths={} steps={} epsilon={} drift={}",
        s.paths,
        sde_cfg.n_steps,
        s.epsilon,
        sde_cfg.drift.name()
    ))
}

fn column_moments(x: &DenseArray, j: usize) -> (f64, f64) {
    let n = x.rows() as f64;
    let m = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
    let v = (0..x.rows()).map(|i| (x.get(i, j) - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}
