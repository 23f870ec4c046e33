//! Geometry of the final-layer activations: maximal-probability directions,
//! average directions over returning suffixes, plane projections, attention
//! patterns, saturation probes and single-symbol sensitivity.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::automata::{MooreMachine, StateId, Symbol, Word};
use crate::error::{invalid, Error, Result};
use crate::extraction::SequenceModel;
use crate::languages::{returning_suffixes, shortest_prefix_to};
use crate::net::{Model, OutputHead};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// The output layer as seen from the normalised activation:
/// `logits = W t + b`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputMap {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub head: OutputHead,
}

impl OutputMap {
    pub fn from_model(model: &Model<f32>) -> Self {
        let (w, b) = model.folded_unembedding();
        Self {
            w,
            b,
            head: model.config().head,
        }
    }

    pub fn logits(&self, t: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.b).map(|(row, b)| dot(row, t) + b).collect()
    }

    /// Class probabilities (softmax) or per-bit probabilities (sigmoid).
    pub fn probs(&self, t: &[f64]) -> Vec<f64> {
        let logits = self.logits(t);
        match self.head {
            OutputHead::Softmax => softmax(&logits),
            OutputHead::Sigmoid => logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MDirection {
    pub output: usize,
    /// Unit vector.
    pub direction: Vec<f64>,
    /// `p_output` at `radius · direction`.
    pub probability: f64,
    pub steps: usize,
    pub converged: bool,
    /// `‖m̂ − normalize(∇p_output)‖` at the returned point.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MDirections {
    pub radius: f64,
    pub directions: Vec<MDirection>,
}

impl MDirections {
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.directions.iter().map(|m| m.direction.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MDirectionOptions {
    /// Search on the unit sphere instead of the radius-√d sphere.
    pub unit_sphere: bool,
    pub max_steps: usize,
    /// Stop once the residual drops below this.
    pub tolerance: f64,
}

impl Default for MDirectionOptions {
    fn default() -> Self {
        Self {
            unit_sphere: false,
            max_steps: 20_000,
            tolerance: 1e-9,
        }
    }
}

impl OutputMap {
    /// `log p_i(t)`, accurate even when `p_i` is within rounding of 1.
    pub fn log_prob(&self, t: &[f64], i: usize) -> f64 {
        let z = self.logits(t);
        match self.head {
            OutputHead::Softmax => {
                let rest: f64 = z.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, zj)| (zj - z[i]).exp()).sum();
                -rest.ln_1p()
            }
            OutputHead::Sigmoid => -(-z[i]).exp().ln_1p(),
        }
    }

    /// Gradient of `log p_i` with respect to `t`; parallel to `∇p_i`.
    pub fn log_prob_gradient(&self, t: &[f64], i: usize) -> Vec<f64> {
        let p = self.probs(t);
        let d = t.len();
        match self.head {
            OutputHead::Softmax => {
                let mut g = self.w[i].clone();
                for (pj, row) in p.iter().zip(&self.w) {
                    for k in 0..d {
                        g[k] -= pj * row[k];
                    }
                }
                g
            }
            OutputHead::Sigmoid => self.w[i].iter().map(|w| (1.0 - p[i]) * w).collect(),
        }
    }
}

/// `‖t̂ − normalize(∇p_i(t))‖`, zero exactly at stationary points that point
/// uphill.
fn stationarity_residual(map: &OutputMap, t: &[f64], i: usize) -> f64 {
    let g = map.log_prob_gradient(t, i);
    let gn = norm(&g);
    if gn == 0.0 {
        return f64::INFINITY;
    }
    let th = normalize(t);
    th.iter().zip(&g).map(|(a, b)| (a - b / gn).powi(2)).sum::<f64>().sqrt()
}

/// For every output, the direction on the sphere that maximises its
/// probability. Runs projected gradient ascent on `log p_i(r·t̂)` from
/// `w_i − mean_j w_j`, growing the step after each accepted move and halving
/// it after each rejected one.
pub fn m_directions(map: &OutputMap, options: &MDirectionOptions) -> Result<MDirections> {
    let n_out = map.w.len();
    if n_out == 0 {
        return Err(invalid("output map has no rows"));
    }
    let d = map.w[0].len();
    let radius = if options.unit_sphere { 1.0 } else { (d as f64).sqrt() };
    let mean: Vec<f64> = (0..d).map(|k| map.w.iter().map(|r| r[k]).sum::<f64>() / n_out as f64).collect();
    let scaled = |dir: &[f64]| dir.iter().map(|x| x * radius).collect::<Vec<_>>();
    let mut directions = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let start: Vec<f64> = if map.head == OutputHead::Softmax && n_out > 1 {
            map.w[i].iter().zip(&mean).map(|(w, m)| w - m).collect()
        } else {
            map.w[i].clone()
        };
        if norm(&start) == 0.0 {
            return Err(invalid(format!("output {i} has a degenerate weight row")));
        }
        let mut th = normalize(&start);
        let mut f = map.log_prob(&scaled(&th), i);
        let mut step = 1.0;
        let mut steps = 0;
        let mut converged = false;
        while steps < options.max_steps {
            let t = scaled(&th);
            if stationarity_residual(map, &t, i) < options.tolerance {
                converged = true;
                break;
            }
            let g = map.log_prob_gradient(&t, i);
            let radial = dot(&g, &th);
            let tangent: Vec<f64> = g.iter().zip(&th).map(|(g, t)| g - radial * t).collect();
            let tn = norm(&tangent);
            if tn == 0.0 || step < 1e-14 {
                break;
            }
            steps += 1;
            let cand = normalize(&th.iter().zip(&tangent).map(|(t, g)| t + step * g / tn).collect::<Vec<_>>());
            let fc = map.log_prob(&scaled(&cand), i);
            if fc >= f {
                th = cand;
                f = fc;
                step = (step * 1.5).min(1.0);
            } else {
                step *= 0.5;
            }
        }
        let at = |dir: &[f64]| map.probs(&scaled(dir))[i];
        let neg: Vec<f64> = th.iter().map(|x| -x).collect();
        if at(&neg) > at(&th) {
            th = neg;
        }
        let residual = stationarity_residual(map, &scaled(&th), i);
        directions.push(MDirection {
            output: i,
            probability: at(&th),
            residual,
            converged: converged || residual < options.tolerance,
            direction: th,
            steps,
        });
    }
    Ok(MDirections { radius, directions })
}

/// Angles in degrees between every pair of directions, in (i, j) order.
pub fn pairwise_angles(dirs: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            out.push((i, j, cosine(&dirs[i], &dirs[j]).clamp(-1.0, 1.0).acos().to_degrees()));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuffixRecord {
    pub state: StateId,
    pub suffix: String,
    pub length: usize,
    pub cos_to_mean: f64,
    /// Cosine to each m-direction, in output order.
    pub cos_to_m: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ADirection {
    pub state: StateId,
    pub prefix: String,
    pub n_suffixes: usize,
    /// Unit vector.
    pub direction: Vec<f64>,
    pub mean_cos_to_mean: f64,
    pub mean_cos_to_m: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct SuffixParams {
    pub max_len: usize,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for SuffixParams {
    fn default() -> Self {
        Self {
            max_len: 100,
            beam_width: 10,
            seed: 0,
        }
    }
}

/// Average activation direction of `state`: the normalised mean of the
/// model's state vectors on `p·s` for the shortest prefix `p` reaching the
/// state and every returning suffix `s`.
pub fn a_direction(
    model: &dyn SequenceModel,
    machine: &MooreMachine,
    state: StateId,
    params: &SuffixParams,
    m_dirs: &[Vec<f64>],
) -> Result<(ADirection, Vec<SuffixRecord>)> {
    let prefix = shortest_prefix_to(machine, state)?;
    let suffixes = returning_suffixes(machine, state, params.max_len, params.beam_width, params.seed)?;
    let vectors: Vec<Vec<f64>> = suffixes
        .iter()
        .map(|s| model.observe(&[prefix.as_slice(), s].concat()).map(|o| o.vector))
        .collect::<Result<_>>()?;
    let d = model.dim();
    let mut mean = vec![0.0; d];
    for v in &vectors {
        for k in 0..d {
            mean[k] += v[k] / vectors.len() as f64;
        }
    }
    let direction = normalize(&mean);
    let alphabet = machine.alphabet();
    let records: Vec<SuffixRecord> = suffixes
        .iter()
        .zip(&vectors)
        .map(|(s, v)| SuffixRecord {
            state,
            suffix: alphabet.format_word(s),
            length: s.len(),
            cos_to_mean: cosine(v, &direction),
            cos_to_m: m_dirs.iter().map(|m| cosine(v, m)).collect(),
        })
        .collect();
    let n = records.len() as f64;
    let a = ADirection {
        state,
        prefix: alphabet.format_word(&prefix),
        n_suffixes: records.len(),
        mean_cos_to_mean: records.iter().map(|r| r.cos_to_mean).sum::<f64>() / n,
        mean_cos_to_m: (0..m_dirs.len()).map(|i| records.iter().map(|r| r.cos_to_m[i]).sum::<f64>() / n).collect(),
        direction,
    };
    Ok((a, records))
}

/// Coordinates of points in the best-fit plane through the origin of a set
/// of directions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaneProjection {
    /// Orthonormal basis of the plane.
    pub basis: [Vec<f64>; 2],
    pub coords: Vec<[f64; 2]>,
    /// Norm of each point's component orthogonal to the plane.
    pub perpendicular: Vec<f64>,
}

/// Projects `points` onto the plane spanned by the top two right singular
/// vectors of the matrix whose rows are `directions`.
pub fn plane_projection(directions: &[Vec<f64>], points: &[Vec<f64>]) -> Result<PlaneProjection> {
    if directions.len() < 2 {
        return Err(invalid("a plane needs at least two directions"));
    }
    let d = directions[0].len();
    if directions.iter().chain(points).any(|v| v.len() != d) {
        return Err(invalid("all vectors must share one dimension"));
    }
    let rows = directions.len().max(2);
    let mut m = DMatrix::<f64>::zeros(rows.max(d), d);
    for (i, v) in directions.iter().enumerate() {
        for k in 0..d {
            m[(i, k)] = v[k];
        }
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| invalid("singular value decomposition failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (s0, s1) = (svd.singular_values[order[0]], svd.singular_values[order[1]]);
    if s1 <= 1e-6 * s0.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "directions span fewer than two dimensions (singular values {s0:.3e}, {s1:.3e})"
        )));
    }
    let basis = [
        (0..d).map(|k| v_t[(order[0], k)]).collect::<Vec<f64>>(),
        (0..d).map(|k| v_t[(order[1], k)]).collect::<Vec<f64>>(),
    ];
    let mut coords = Vec::with_capacity(points.len());
    let mut perpendicular = Vec::with_capacity(points.len());
    for p in points {
        let c = [dot(p, &basis[0]), dot(p, &basis[1])];
        let resid: Vec<f64> = (0..d).map(|k| p[k] - c[0] * basis[0][k] - c[1] * basis[1][k]).collect();
        coords.push(c);
        perpendicular.push(norm(&resid));
    }
    Ok(PlaneProjection {
        basis,
        coords,
        perpendicular,
    })
}

/// Post-softmax attention weights of every head on `word` (with the
/// beginning-of-sequence token prepended), row = query position.
pub fn attention_patterns(model: &Model<f32>, word: &[Symbol]) -> Result<Vec<Vec<Vec<f64>>>> {
    let trace = model.forward(&model.with_bos(word))?;
    Ok(trace
        .attention
        .iter()
        .map(|head| head.iter().map(|row| row.iter().map(|&a| f64::from(a)).collect()).collect())
        .collect())
}

/// Families of long probe sequences parameterised by `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFamily {
    /// `0 1ⁿ`
    ZeroThenOnes,
    /// `0ⁿ 1`
    ZerosThenOne,
    /// `(01)ⁿ`
    Alternating,
    /// `0ⁿ`
    AllZeros,
    /// `1ⁿ`
    AllOnes,
}

impl ProbeFamily {
    pub const ALL: [ProbeFamily; 5] = [
        ProbeFamily::ZeroThenOnes,
        ProbeFamily::ZerosThenOne,
        ProbeFamily::Alternating,
        ProbeFamily::AllZeros,
        ProbeFamily::AllOnes,
    ];

    pub fn word(self, n: usize) -> Word {
        match self {
            ProbeFamily::ZeroThenOnes => std::iter::once(0).chain(std::iter::repeat(1).take(n)).collect(),
            ProbeFamily::ZerosThenOne => std::iter::repeat(0).take(n).chain(std::iter::once(1)).collect(),
            ProbeFamily::Alternating => [0, 1].repeat(n),
            ProbeFamily::AllZeros => vec![0; n],
            ProbeFamily::AllOnes => vec![1; n],
        }
    }

    fn needs_binary(self) -> bool {
        self != ProbeFamily::AllZeros
    }
}

impl std::fmt::Display for ProbeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeFamily::ZeroThenOnes => "zero-then-ones",
            ProbeFamily::ZerosThenOne => "zeros-then-one",
            ProbeFamily::Alternating => "alternating",
            ProbeFamily::AllZeros => "all-zeros",
            ProbeFamily::AllOnes => "all-ones",
        })
    }
}

impl std::str::FromStr for ProbeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeFamily::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| invalid(format!("unknown probe family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeCurve {
    pub family: ProbeFamily,
    pub n: usize,
    /// Probability vector at every position (`|word| + 1` rows).
    pub probabilities: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    pub target: Vec<usize>,
    /// First position whose predicted output differs from the target's.
    pub failure_position: Option<usize>,
}

pub fn saturation_probe(
    model: &dyn SequenceModel,
    target: &MooreMachine,
    family: ProbeFamily,
    lengths: &[usize],
) -> Result<Vec<ProbeCurve>> {
    if family.needs_binary() && model.input_alphabet().len() < 2 {
        return Err(invalid(format!("probe family {family} needs a binary alphabet")));
    }
    lengths
        .iter()
        .map(|&n| {
            let word = family.word(n);
            let predicted = model.outputs(&word)?;
            let target_out = target.run(&word)?.1;
            let failure_position = predicted.iter().zip(&target_out).position(|(p, t)| p != t);
            Ok(ProbeCurve {
                family,
                n,
                probabilities: model.probabilities(&word)?,
                predicted,
                target: target_out,
                failure_position,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayPoint {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayReport {
    pub points: Vec<DecayPoint>,
    /// Least-squares slope of log(median delta) against log n.
    pub slope_median: f64,
    pub slope_mean: f64,
}

fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(_, &y)| y > 0.0).map(|(&x, &y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Sensitivity of the final activation to one flipped symbol. For each `n`,
/// `bases` random binary words of length `n` are compared with copies where
/// one uniformly chosen position among the first `n − 1` is flipped. The last
/// symbol is never flipped because it feeds the read-out position directly.
pub fn hahn_decay(model: &dyn SequenceModel, grid: &[usize], bases: usize, seed: u64) -> Result<DecayReport> {
    if model.input_alphabet().len() != 2 {
        return Err(invalid("single-symbol flips need a binary alphabet"));
    }
    if bases == 0 || grid.iter().any(|&n| n < 2) {
        return Err(invalid("need at least one base word of length 2 or more"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(grid.len());
    for &n in grid {
        let mut deltas = Vec::with_capacity(bases);
        for _ in 0..bases {
            let base: Word = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let mut flipped = base.clone();
            let pos = rng.gen_range(0..n - 1);
            flipped[pos] = 1 - flipped[pos];
            let a = model.observe(&base)?.vector;
            let b = model.observe(&flipped)?.vector;
            deltas.push(norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>()));
        }
        deltas.sort_by(f64::total_cmp);
        let median = if bases % 2 == 1 {
            deltas[bases / 2]
        } else {
            (deltas[bases / 2 - 1] + deltas[bases / 2]) / 2.0
        };
        let mean = deltas.iter().sum::<f64>() / bases as f64;
        points.push(DecayPoint { n, median, mean });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let medians: Vec<f64> = points.iter().map(|p| p.median).collect();
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    Ok(DecayReport {
        slope_median: log_log_slope(&xs, &medians),
        slope_mean: log_log_slope(&xs, &means),
        points,
    })
}

/// Writes attention matrices as CSV rows `head,query,key,weight`.
pub fn write_attention_csv(path: &Path, patterns: &[Vec<Vec<f64>>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["head", "query", "key", "weight"])?;
    for (h, m) in patterns.iter().enumerate() {
        for (i, row) in m.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                w.write_record([h.to_string(), i.to_string(), j.to_string(), a.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes probe curves as CSV rows `family,n,position,predicted,target,p0,p1,…`.
pub fn write_probe_csv(path: &Path, curves: &[ProbeCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = curves.iter().flat_map(|c| c.probabilities.first()).map(Vec::len).max().unwrap_or(0);
    let mut header = vec!["family".to_string(), "n".into(), "position".into(), "predicted".into(), "target".into()];
    header.extend((0..width).map(|i| format!("p{i}")));
    w.write_record(&header)?;
    for c in curves {
        for (i, p) in c.probabilities.iter().enumerate() {
            let mut rec = vec![c.family.to_string(), c.n.to_string(), i.to_string(), c.predicted[i].to_string(), c.target[i].to_string()];
            rec.extend(p.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_decay_csv(path: &Path, report: &DecayReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "median_delta", "mean_delta"])?;
    for p in &report.points {
        w.write_record([p.n.to_string(), p.median.to_string(), p.mean.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_similarity_csv(path: &Path, records: &[SuffixRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = records.first().map_or(0, |r| r.cos_to_m.len());
    let mut header = vec!["state".to_string(), "suffix".into(), "length".into(), "cos_to_mean".into()];
    header.extend((0..width).map(|i| format!("cos_to_m{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut rec = vec![r.state.to_string(), r.suffix.clone(), r.length.to_string(), r.cos_to_mean.to_string()];
        rec.extend(r.cos_to_m.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
