use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::diffusion::{ddpm_sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::experiments::target::{reward_oracle, ToyTarget};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    OnPolicy,
    /// Winner from an external, stronger generator.
    Unlike,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::OnPolicy => "on-policy",
            Provenance::Unlike => "unlike",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on-policy" => Ok(Provenance::OnPolicy),
            "unlike" => Ok(Provenance::Unlike),
            other => Err(Error::Parse(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub cond: usize,
    pub x0_w: Vec<f64>,
    pub x0_l: Vec<f64>,
    pub reward_w: f64,
    pub reward_l: f64,
    pub provenance: Provenance,
}

impl PreferencePair {
    /// Orders `a` and `b` by oracle reward; `a` wins ties.
    pub fn ranked(target: &ToyTarget, cond: usize, a: Vec<f64>, b: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let ra = reward_oracle(target, cond, &a)?;
        let rb = reward_oracle(target, cond, &b)?;
        let (x0_w, reward_w, x0_l, reward_l) = if ra >= rb { (a, ra, b, rb) } else { (b, rb, a, ra) };
        Ok(Self {
            cond,
            x0_w,
            x0_l,
            reward_w,
            reward_l,
            provenance,
        })
    }
}

/// `n` on-policy pairs: two model samples per random condition, ranked by the
/// oracle. The first draw wins ties.
pub fn gen_pairs(
    net: &dyn NoisePredictor,
    target: &ToyTarget,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<PreferencePair>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let conds = target.sample_conditions(n, rng);
    let doubled: Vec<usize> = conds.iter().chain(&conds).copied().collect();
    let x = ddpm_sample(net, &doubled, sched, rng)?;
    conds
        .iter()
        .enumerate()
        .map(|(i, &c)| PreferencePair::ranked(target, c, x.row(i).to_vec(), x.row(n + i).to_vec(), Provenance::OnPolicy))
        .collect()
}

/// `n` pairs whose candidate `a` comes straight from the condition's target
/// mode and `b` from the model; both are ranked by the oracle like any other
/// pair, so the target draw wins almost always.
pub fn gen_unlike_pairs(
    target: &ToyTarget,
    net: &dyn NoisePredictor,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<PreferencePair>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let conds = target.sample_conditions(n, rng);
    let mut external = Vec::with_capacity(n);
    for &c in &conds {
        external.push(target.sample_designated(c, rng)?);
    }
    let x = ddpm_sample(net, &conds, sched, rng)?;
    conds
        .iter()
        .zip(external)
        .enumerate()
        .map(|(i, (&c, a))| PreferencePair::ranked(target, c, a, x.row(i).to_vec(), Provenance::Unlike))
        .collect()
}

/// Mean `reward_w − reward_l`.
pub fn mean_reward_gap(pairs: &[PreferencePair]) -> f64 {
    pairs.iter().map(|p| p.reward_w - p.reward_l).sum::<f64>() / pairs.len().max(1) as f64
}

/// Columns: `pair_id,cond,provenance,reward_w,reward_l,xw0..,xl0..`.
pub fn write_pairs_csv<W: Write>(pairs: &[PreferencePair], out: W) -> Result<()> {
    let dim = pairs.first().map_or(0, |p| p.x0_w.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["pair_id".to_string(), "cond".into(), "provenance".into(), "reward_w".into(), "reward_l".into()];
    header.extend((0..dim).map(|j| format!("xw{j}")));
    header.extend((0..dim).map(|j| format!("xl{j}")));
    w.write_record(&header)?;
    for (i, p) in pairs.iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            p.cond.to_string(),
            p.provenance.to_string(),
            p.reward_w.to_string(),
            p.reward_l.to_string(),
        ];
        rec.extend(p.x0_w.iter().chain(&p.x0_l).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs_csv<R: Read>(input: R) -> Result<Vec<PreferencePair>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let dim = headers.iter().filter(|h| h.starts_with("xw")).count();
    if headers.len() != 5 + 2 * dim || dim == 0 {
        return Err(Error::Parse(format!("unexpected pairs header: {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let num = |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse(format!("bad {what} `{s}`"))) };
    let mut pairs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let cond = rec[1].parse().map_err(|_| Error::Parse(format!("bad condition `{}`", &rec[1])))?;
        let xs: Vec<f64> = (5..5 + 2 * dim).map(|j| num(&rec[j], "coordinate")).collect::<Result<_>>()?;
        let pair = PreferencePair {
            cond,
            provenance: rec[2].parse()?,
            reward_w: num(&rec[3], "reward")?,
            reward_l: num(&rec[4], "reward")?,
            x0_w: xs[..dim].to_vec(),
            x0_l: xs[dim..].to_vec(),
        };
        if pair.reward_w < pair.reward_l {
            return Err(Error::Parse(format!("pair {} has reward_w < reward_l", &rec[0])));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::FnPredictor;
    use crate::numerics::DenseArray;
    use crate::rng;

    #[test]
    fn ties_go_to_the_first_draw() {
        let t = ToyTarget::default();
        let p = PreferencePair::ranked(&t, 0, vec![2.5, 1.0], vec![2.5, -1.0], Provenance::OnPolicy).unwrap();
        assert_eq!(p.x0_w, vec![2.5, 1.0]);
        let p = PreferencePair::ranked(&t, 0, vec![0.0, 0.0], vec![2.0, 0.0], Provenance::OnPolicy).unwrap();
        assert_eq!(p.x0_w, vec![2.0, 0.0]);
    }

    #[test]
    fn generated_pairs_are_ordered() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let zero = FnPredictor::new(2, |x: &DenseArray, _: &[usize], _: &[usize]| Ok(DenseArray::zeros(x.shape())));
        let t = ToyTarget::default();
        let on = gen_pairs(&zero, &t, 200, &sched, &mut rng::seeded(3)).unwrap();
        let un = gen_unlike_pairs(&t, &zero, 200, &sched, &mut rng::seeded(3)).unwrap();
        assert!(on.iter().chain(&un).all(|p| p.reward_w >= p.reward_l));
        assert!(on.iter().all(|p| p.provenance == Provenance::OnPolicy));
        assert!(un.iter().all(|p| p.provenance == Provenance::Unlike));
        assert!(mean_reward_gap(&un) > 0.0);
        assert_eq!(on, gen_pairs(&zero, &t, 200, &sched, &mut rng::seeded(3)).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let t = ToyTarget::default();
        let pairs = vec![
            PreferencePair::ranked(&t, 1, vec![0.1, 2.4], vec![1.0, -0.3], Provenance::OnPolicy).unwrap(),
            PreferencePair::ranked(&t, 3, vec![0.3, -2.2], vec![1e-17, 5.0], Provenance::Unlike).unwrap(),
        ];
        let mut buf = Vec::new();
        write_pairs_csv(&pairs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("pair_id,cond,provenance,reward_w,reward_l,xw0,xw1,xl0,xl1\n"));
        assert_eq!(read_pairs_csv(buf.as_slice()).unwrap(), pairs);
    }
}
