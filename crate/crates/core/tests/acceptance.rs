//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use semcode::clustering::{self, EmbeddingSet};
use semcode::codec::{self, CodecOptions, ProgressiveBitstream};
use semcode::entropycoder::{self, clip_to_support, GaussianModel, SIGMA_MIN};
use semcode::eval::{self, BdMethod, RdPoint};
use semcode::fixtures;
use semcode::formats::{self, Tensor};
use semcode::latent::{ChannelConfig, LatentTensor};
use semcode::models::{GaussianField, ModelBundle, ModelConfig};
use semcode::rng::Lcg64;
use semcode::taxonomy::Taxonomy;

const TRIALS: usize = 200;
const ROUNDTRIP_BUDGET: Duration = Duration::from_secs(60);
const KERNEL_TOL: f64 = 1e-5;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn random_channels(rng: &mut Lcg64, max_total: usize) -> ChannelConfig {
    let total = 3 + rng.below(max_total - 2);
    let mut cuts = [1 + rng.below(total - 2), 0];
    cuts[1] = cuts[0] + 1 + rng.below(total - cuts[0] - 1);
    ChannelConfig::new(vec![cuts[0], cuts[1], total]).unwrap()
}

fn tensor_bytes(t: &LatentTensor) -> Vec<u8> {
    formats::write_tensor(&t.to_tensor())
}

fn ordered_models(params: &GaussianField, order: &[usize]) -> Vec<GaussianModel> {
    order
        .iter()
        .map(|&i| GaussianModel::new(params.mu[i], params.sigma[i]))
        .collect()
}

struct Trial {
    bundle: ModelBundle,
    y: LatentTensor,
    z: LatentTensor,
}

fn make_trial(i: usize) -> Trial {
    let mut rng = Lcg64::new(0x5eed_0000 + i as u64);
    let (channels, h, w) = if i == 0 {
        (ChannelConfig::new(vec![128, 224, 320]).unwrap(), 16, 16)
    } else {
        (
            random_channels(&mut rng, 320),
            1 + rng.below(16),
            1 + rng.below(16),
        )
    };
    let config = ModelConfig {
        channels,
        ..ModelConfig::default()
    };
    let bundle = ModelBundle::random(config, rng.next_u64()).unwrap();
    let (y, z) = fixtures::codec_instance(&bundle, h, w, rng.next_u64()).unwrap();
    Trial { bundle, y, z }
}

#[derive(Default)]
struct CodecOutcome {
    roundtrip: Vec<String>,
    roundtrip_time: Duration,
    prefix: Vec<String>,
    mid_cuts: usize,
    rate: Vec<String>,
    worst_rate_slack: f64,
    zero_delta: Vec<String>,
    zero_delta_trials: usize,
}

fn prefix_checks(
    t: &Trial,
    bs: &ProgressiveBitstream,
    trace: &codec::CodecTrace,
    out: &mut CodecOutcome,
) -> Result<(), String> {
    let bytes = bs.to_bytes();
    let header = &bs.header;
    let cfg = t.bundle.channel_config();
    let n = cfg.num_blocks();
    let plane = t.y.plane();
    let truth = t.y.data();

    for b in 0..=n {
        let prefix = &bytes[..header.segment_offset(b + 1)];
        let got = codec::decode_truncated(prefix, &t.bundle).map_err(|e| e.to_string())?;
        let want = if b == 0 {
            LatentTensor::zeros(cfg.total_channels(), t.y.height(), t.y.width())
        } else {
            codec::decode(bs, &t.bundle, b).map_err(|e| e.to_string())?
        };
        ensure!(
            tensor_bytes(&got.latent) == tensor_bytes(&want),
            "boundary {b}: truncated decode differs from decode(up to {b})"
        );
        for (i, &c) in got.exact_counts.iter().enumerate() {
            let expect = if i < b { got.block_sizes[i] } else { 0 };
            ensure!(
                c == expect,
                "boundary {b}: block {} count {c} != {expect}",
                i + 1
            );
        }
    }

    for b in 1..=n {
        let seg_start = header.segment_offset(b);
        let seg_len = header.segment_lengths[b];
        let block = &trace.blocks[b - 1];
        let order = block.order.positions();
        let base = block.params.first_channel * plane;
        for frac in [25, 50, 75] {
            let cut = seg_len * frac / 100;
            let got = codec::decode_truncated(&bytes[..seg_start + cut], &t.bundle)
                .map_err(|e| e.to_string())?;
            out.mid_cuts += 1;
            let k = got.exact_counts[b - 1];
            let independent = if cut == 0 {
                0
            } else {
                entropycoder::decode_symbols(
                    &bs.segments[b][..cut],
                    &ordered_models(&block.params, order),
                )
                .decoded_count()
            };
            ensure!(
                k == independent,
                "block {b} at {frac}%: count {k}, coder reports {independent}"
            );
            ensure!(
                k < order.len() || cut == seg_len,
                "block {b} at {frac}%: full count"
            );
            let data = got.latent.data();
            let earlier = cfg.prefix_end(b - 1) * plane;
            ensure!(
                data[..earlier] == truth[..earlier],
                "block {b} at {frac}%: earlier blocks differ"
            );
            for (rank, &pos) in order.iter().enumerate() {
                let v = data[base + pos];
                if rank < k {
                    ensure!(
                        v == truth[base + pos],
                        "block {b} at {frac}%: sigma-order prefix symbol {rank} wrong"
                    );
                } else if cut > 0 {
                    let fill = clip_to_support(block.params.mu[pos].round() as i64);
                    ensure!(
                        v == fill,
                        "block {b} at {frac}%: fill value wrong at {rank}"
                    );
                }
            }
            let later = cfg.prefix_end(b) * plane;
            ensure!(
                data[later..].iter().all(|&v| v == 0),
                "block {b} at {frac}%: later blocks not zero"
            );
        }
    }
    Ok(())
}

fn codec_trials() -> CodecOutcome {
    let mut out = CodecOutcome::default();
    let opts = CodecOptions::default();
    for i in 0..TRIALS {
        let start = Instant::now();
        let t = make_trial(i);
        let encoded = codec::encode_traced(&t.y, &t.z, &t.bundle, &opts);
        let (bs, trace) = match encoded {
            Ok(v) => v,
            Err(e) => {
                out.roundtrip.push(format!("trial {i}: encode failed: {e}"));
                continue;
            }
        };
        let bytes = bs.to_bytes();
        let n = t.bundle.channel_config().num_blocks();
        let decoded =
            ProgressiveBitstream::from_bytes(&bytes).and_then(|p| codec::decode(&p, &t.bundle, n));
        out.roundtrip_time += start.elapsed();
        match decoded {
            Ok(d) if d == t.y => {}
            Ok(_) => out
                .roundtrip
                .push(format!("trial {i}: decoded latent differs")),
            Err(e) => out.roundtrip.push(format!("trial {i}: decode failed: {e}")),
        }

        if let Err(e) = prefix_checks(&t, &bs, &trace, &mut out) {
            out.prefix.push(format!("trial {i}: {e}"));
        }

        let ideal = std::iter::once(trace.hyper_ideal_bits.unwrap())
            .chain(trace.blocks.iter().map(|b| b.ideal_bits.unwrap()));
        for (s, ideal) in ideal.enumerate() {
            let actual = 8.0 * bs.header.segment_lengths[s] as f64;
            let allowed = 0.01 * ideal + 256.0;
            let slack = (actual - ideal).abs() / allowed;
            out.worst_rate_slack = out.worst_rate_slack.max(slack);
            if slack > 1.0 {
                out.rate.push(format!(
                    "trial {i} segment {s}: {actual} bits vs ideal {ideal:.1}"
                ));
            }
        }

        if i % 4 == 0 {
            out.zero_delta_trials += 1;
            let zb = t.bundle.with_zero_delta();
            let with = codec::encode(&t.y, &t.z, &zb, &opts).unwrap();
            let without = CodecOptions {
                delta_refinement: false,
                ..opts
            };
            let off = codec::encode(&t.y, &t.z, &zb, &without).unwrap();
            let (a, b) = (with.to_bytes(), off.to_bytes());
            let differing: Vec<usize> = (0..a.len().max(b.len()))
                .filter(|&j| a.get(j) != b.get(j))
                .collect();
            // Only the refinement flag in the header may differ.
            if with.segments != off.segments || differing != [5] {
                out.zero_delta
                    .push(format!("trial {i}: streams differ at bytes {differing:?}"));
            }
        }
    }
    out
}

fn summarize(errors: &[String]) -> String {
    format!("{} (first: {})", errors.len(), errors[0])
}

fn criterion_roundtrip(o: &CodecOutcome) -> Check {
    ensure!(
        o.roundtrip.is_empty(),
        "{} failing trials",
        summarize(&o.roundtrip)
    );
    ensure!(
        o.roundtrip_time < ROUNDTRIP_BUDGET,
        "took {:.1?}, budget {ROUNDTRIP_BUDGET:?}",
        o.roundtrip_time
    );
    Ok(format!(
        "{TRIALS}/{TRIALS} exact in {:.1?}",
        o.roundtrip_time
    ))
}

fn criterion_prefix(o: &CodecOutcome) -> Check {
    ensure!(o.prefix.is_empty(), "{}", summarize(&o.prefix));
    Ok(format!("{TRIALS} trials, {} mid-block cuts", o.mid_cuts))
}

fn criterion_rate(o: &CodecOutcome) -> Check {
    ensure!(o.rate.is_empty(), "{}", summarize(&o.rate));
    Ok(format!(
        "worst segment uses {:.1}% of its allowance",
        100.0 * o.worst_rate_slack
    ))
}

fn criterion_zero_delta(o: &CodecOutcome) -> Check {
    ensure!(o.zero_delta.is_empty(), "{}", summarize(&o.zero_delta));
    Ok(format!(
        "{} trials, segments identical, header differs only in the refinement flag",
        o.zero_delta_trials
    ))
}

fn random_tree(rng: &mut Lcg64) -> (Vec<Option<usize>>, String) {
    let n = 1 + rng.below(200);
    let mut parent = vec![None];
    for i in 1..n {
        let p = if rng.next_f64() < 0.5 {
            i - 1
        } else {
            rng.below(i)
        };
        parent.push(Some(p));
    }
    let mut lines: Vec<String> = (0..n)
        .map(|i| match parent[i] {
            None => format!("n{i}\t-"),
            Some(p) => format!("n{i}\tn{p}"),
        })
        .collect();
    for i in (1..lines.len()).rev() {
        lines.swap(i, rng.below(i + 1));
    }
    (parent, lines.join("\n"))
}

fn chain(parent: &[Option<usize>], mut i: usize) -> Vec<usize> {
    let mut c = vec![i];
    while let Some(p) = parent[i] {
        c.push(p);
        i = p;
    }
    c
}

fn criterion_wup() -> Check {
    let mut rng = Lcg64::new(5);
    let mut pairs = 0;
    for tree in 0..100 {
        let (parent, text) = random_tree(&mut rng);
        let t = Taxonomy::parse(&text).map_err(|e| format!("tree {tree}: {e}"))?;
        let n = parent.len();
        for i in 0..n {
            let name = format!("n{i}");
            ensure!(
                t.wup(&name, &name).unwrap() == 1.0,
                "tree {tree}: wup({name}, {name}) != 1"
            );
        }
        for _ in 0..1000 {
            let (a, b) = (rng.below(n), rng.below(n));
            let (ca, cb) = (chain(&parent, a), chain(&parent, b));
            let lca = *ca.iter().find(|x| cb.contains(x)).unwrap();
            let dl = chain(&parent, lca).len() as f64;
            let want = 2.0 * dl / (ca.len() + cb.len()) as f64;
            let (na, nb) = (format!("n{a}"), format!("n{b}"));
            let got = t.wup(&na, &nb).unwrap();
            ensure!(
                got == want,
                "tree {tree}: wup({na}, {nb}) = {got}, oracle {want}"
            );
            ensure!(
                t.lca(&na, &nb).unwrap() == format!("n{lca}"),
                "tree {tree}: lca({na}, {nb})"
            );
            pairs += 1;
        }
    }
    Ok(format!("100 trees, {pairs} pairs exact"))
}

fn criterion_coherence() -> Check {
    let seed = 0;
    let run = || {
        let t = Taxonomy::parse(&fixtures::skewed_taxonomy()).unwrap();
        let e = fixtures::hierarchical_embeddings(&t, 32, seed)
            .normalize()
            .unwrap();
        let km = clustering::kmeans(&e, 10, seed).unwrap();
        let cut = t.depth_cut(10).unwrap();
        let coh = t.coherence(&km.clustering).unwrap();
        (
            coh,
            clustering::balance(&km.clustering).max_share,
            clustering::balance(&cut.clustering).max_share,
            km.clustering,
        )
    };
    let (coh, km_share, cut_share, c1) = run();
    let (coh2, _, _, c2) = run();
    ensure!(c1 == c2 && coh == coh2, "reruns disagree");
    ensure!(coh.gap > 0.0, "k-means gap {} not positive", coh.gap);
    ensure!(
        cut_share > km_share,
        "depth-cut max share {cut_share} not above k-means {km_share}"
    );
    Ok(format!(
        "gap {:.4}, max share depth-cut {cut_share:.2} vs k-means {km_share:.2}",
        coh.gap
    ))
}

fn partition(assign: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assign.iter().enumerate() {
        groups.entry(a).or_default().push(i);
    }
    let mut v: Vec<Vec<usize>> = groups.into_values().collect();
    v.sort();
    v
}

fn partition_sse(e: &EmbeddingSet, assign: &[usize], k: usize) -> f64 {
    let d = e.dim();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..e.len()).filter(|&i| assign[i] == c).collect();
        let mut mean = vec![0.0; d];
        for &i in &members {
            for (m, x) in mean.iter_mut().zip(e.row(i)) {
                *m += x / members.len() as f64;
            }
        }
        for &i in &members {
            total += e
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(x, m)| (x - m).powi(2))
                .sum::<f64>();
        }
    }
    total
}

fn criterion_kmeans() -> Check {
    let e = fixtures::two_bundle_points();
    let n = e.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 1..(1u32 << n) - 1 {
        let assign: Vec<usize> = (0..n).map(|i| (mask >> i & 1) as usize).collect();
        let s = partition_sse(&e, &assign, 2);
        if s < best.0 {
            best = (s, assign);
        }
    }
    let optimum = partition(&best.1);
    let mut runs = 0;
    for seed in 0..32 {
        let r = clustering::kmeans(&e, 2, seed).unwrap();
        let labels: Vec<usize> = e
            .labels()
            .iter()
            .map(|l| r.clustering.cluster_of(l).unwrap())
            .collect();
        ensure!(
            partition(&labels) == optimum,
            "seed {seed}: partition is not the optimum"
        );
        runs += 1;
        check_monotone(&r.sse_history, &format!("two-bundle seed {seed}"))?;
    }
    let t = Taxonomy::parse(&fixtures::skewed_taxonomy()).unwrap();
    for seed in 0..10 {
        let e = fixtures::hierarchical_embeddings(&t, 16, seed)
            .normalize()
            .unwrap();
        for k in [2, 5, 10, 20, 40] {
            let r = clustering::kmeans(&e, k, seed).unwrap();
            check_monotone(&r.sse_history, &format!("embeddings seed {seed} k {k}"))?;
            runs += 1;
        }
    }
    Ok(format!(
        "optimum SSE {:.6} found for 32 seeds; SSE non-increasing in {runs} runs",
        best.0
    ))
}

fn check_monotone(h: &[f64], what: &str) -> Result<(), String> {
    for w in h.windows(2) {
        ensure!(w[1] <= w[0], "{what}: SSE rose from {} to {}", w[0], w[1]);
    }
    Ok(())
}

fn random_curve(rng: &mut Lcg64, level: usize) -> Vec<RdPoint> {
    let n = 4 + rng.below(4);
    let (a, b, c) = (
        rng.uniform(25.0, 40.0),
        rng.uniform(3.0, 8.0),
        rng.uniform(-0.3, 0.0),
    );
    let mut lr = rng.uniform(-3.0, -1.0);
    (0..n)
        .map(|_| {
            lr += rng.uniform(0.3, 0.8);
            RdPoint {
                level,
                bpp: lr.exp(),
                quality: a + b * lr + c * lr * lr,
            }
        })
        .collect()
}

/// Least-squares cubic of log-rate in quality via normal equations on a
/// centred variable.
fn oracle_cubic(points: &[RdPoint]) -> impl Fn(f64) -> f64 {
    let mean = points.iter().map(|p| p.quality).sum::<f64>() / points.len() as f64;
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for p in points {
        let u = p.quality - mean;
        let row = [1.0, u, u * u, u * u * u];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * p.bpp.ln();
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
            .unwrap();
        ata.swap(col, piv);
        atb.swap(col, piv);
        for r in col + 1..4 {
            let f = ata[r][col] / ata[col][col];
            for c in col..4 {
                ata[r][c] -= f * ata[col][c];
            }
            atb[r] -= f * atb[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| ata[r][c] * x[c]).sum();
        x[r] = (atb[r] - s) / ata[r][r];
    }
    move |q| {
        let u = q - mean;
        x[0] + u * (x[1] + u * (x[2] + u * x[3]))
    }
}

fn oracle_pchip(points: &[RdPoint]) -> impl Fn(f64) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.quality.total_cmp(&b.quality));
    let xs: Vec<f64> = pts.iter().map(|p| p.quality).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.bpp.ln()).collect();
    let n = xs.len();
    let h: Vec<f64> = (0..n - 1).map(|i| xs[i + 1] - xs[i]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    if n == 2 {
        m = vec![del[0]; 2];
    } else {
        m[0] = end(h[0], h[1], del[0], del[1]);
        m[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    }
    move |q| {
        let i = xs.partition_point(|&x| x <= q).clamp(1, n - 1) - 1;
        let t = (q - xs[i]) / h[i];
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * ys[i]
            + (t3 - 2.0 * t2 + t) * h[i] * m[i]
            + (-2.0 * t3 + 3.0 * t2) * ys[i + 1]
            + (t3 - t2) * h[i] * m[i + 1]
    }
}

fn dense_bd(a: &[RdPoint], b: &[RdPoint], fa: &dyn Fn(f64) -> f64, fb: &dyn Fn(f64) -> f64) -> f64 {
    let range = |p: &[RdPoint]| {
        p.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
                (l.min(x.quality), h.max(x.quality))
            })
    };
    let (lo, hi) = (range(a).0.max(range(b).0), range(a).1.min(range(b).1));
    let steps = 200_000;
    let dx = (hi - lo) / steps as f64;
    let mut sum = 0.0;
    for i in 0..steps {
        let x = lo + (i as f64 + 0.5) * dx;
        sum += fb(x) - fa(x);
    }
    ((sum * dx) / (hi - lo)).exp_m1() * 100.0
}

fn criterion_bdrate() -> Check {
    let mut rng = Lcg64::new(8);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..50 {
        let a = random_curve(&mut rng, 1);
        for method in [BdMethod::Cubic, BdMethod::Pchip] {
            let same = eval::bd_rate(&a, &a, method).map_err(|e| e.to_string())?;
            ensure!(
                same.abs() < 1e-9,
                "{method:?}: identical curves give {same}"
            );
            let shifted: Vec<RdPoint> = a
                .iter()
                .map(|p| RdPoint {
                    bpp: p.bpp * 1.10,
                    ..*p
                })
                .collect();
            let up = eval::bd_rate(&a, &shifted, method).map_err(|e| e.to_string())?;
            ensure!(
                (up - 10.0).abs() <= 1e-6,
                "{method:?}: x1.10 shift gives {up}"
            );
        }
        let b = random_curve(&mut rng, 1);
        let overlap = a
            .iter()
            .map(|p| p.quality)
            .fold(f64::NEG_INFINITY, f64::max)
            > b.iter().map(|p| p.quality).fold(f64::INFINITY, f64::min)
            && b.iter()
                .map(|p| p.quality)
                .fold(f64::NEG_INFINITY, f64::max)
                > a.iter().map(|p| p.quality).fold(f64::INFINITY, f64::min);
        if !overlap {
            continue;
        }
        let cubic = eval::bd_rate(&a, &b, BdMethod::Cubic).map_err(|e| e.to_string())?;
        let oc = dense_bd(&a, &b, &oracle_cubic(&a), &oracle_cubic(&b));
        let pchip = eval::bd_rate(&a, &b, BdMethod::Pchip).map_err(|e| e.to_string())?;
        let op = dense_bd(&a, &b, &oracle_pchip(&a), &oracle_pchip(&b));
        for (name, got, want) in [("cubic", cubic, oc), ("pchip", pchip, op)] {
            let rel = (got - want).abs() / want.abs().max(1.0);
            worst = worst.max(rel);
            ensure!(rel <= 1e-4, "{name}: {got} vs dense oracle {want}");
        }
        cases += 1;
    }
    Ok(format!(
        "identity and x1.10 exact; {cases} random pairs, worst relative error {worst:.2e}"
    ))
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.as_f32().unwrap().iter().map(|&v| f64::from(v)).collect()
}

/// Named weights as `f64`.
struct Weights(BTreeMap<String, Vec<f64>>);

impl Weights {
    fn get(&self, name: &str) -> &[f64] {
        &self.0[name]
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn oracle_scale(raw: f64) -> f64 {
    softplus(raw + (std::f64::consts::E - 1.0).ln()).max(SIGMA_MIN)
}

fn dense_at(w: &[f64], b: &[f64], input: &[f64], out: usize) -> Vec<f64> {
    let inp = input.len();
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * input[i]).sum::<f64>())
        .collect()
}

/// Per-position feature vectors `[pos][feature]`.
type Field = Vec<Vec<f64>>;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn flatten(f: &Field) -> Vec<f64> {
    let features = f[0].len();
    (0..features)
        .flat_map(|k| f.iter().map(move |v| v[k]))
        .collect()
}

fn oracle_delta(
    wt: &Weights,
    cfg: &ModelConfig,
    block: usize,
    x: &Field,
    h: usize,
    w: usize,
) -> (Field, usize) {
    let pre = format!("delta.{block}");
    let fin = x[0].len();
    let dw = wt.get(&format!("{pre}.depthwise.weight"));
    let db = wt.get(&format!("{pre}.depthwise.bias"));
    let mut x1 = x.clone();
    for y in 0..h {
        for xx in 0..w {
            for f in 0..fin {
                let mut acc = db[f];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as i64 + ky - 1, xx as i64 + kx - 1);
                        if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                            acc += dw[f * 9 + (ky * 3 + kx) as usize]
                                * x[sy as usize * w + sx as usize][f];
                        }
                    }
                }
                x1[y * w + xx][f] += acc.max(0.0);
            }
        }
    }
    let d = cfg.attention_dim;
    let layer = |name: &str, input: &[f64], out: usize| {
        dense_at(
            wt.get(&format!("{pre}.{name}.weight")),
            wt.get(&format!("{pre}.{name}.bias")),
            input,
            out,
        )
    };
    let q: Field = x1.iter().map(|v| layer("attn.query", v, d)).collect();
    let k: Field = x1.iter().map(|v| layer("attn.key", v, d)).collect();
    let v: Field = x1.iter().map(|v| layer("attn.value", v, d)).collect();
    let mut x2 = x1.clone();
    for pos in 0..h * w {
        let (py, px) = (pos / w, pos % w);
        let window: Vec<usize> = (0..h * w)
            .filter(|&u| u / w / 8 == py / 8 && u % w / 8 == px / 8)
            .collect();
        let scores: Vec<f64> = window
            .iter()
            .map(|&u| (0..d).map(|i| q[pos][i] * k[u][i]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let o: Vec<f64> = (0..d)
            .map(|i| window.iter().zip(&e).map(|(&u, a)| a / z * v[u][i]).sum())
            .collect();
        let proj = layer("attn.out", &o, fin);
        for f in 0..fin {
            x2[pos][f] += proj[f];
        }
    }
    let nb = cfg.channels.block_channels(block).len();
    (x2.iter().map(|v| layer("head", v, 2 * nb)).collect(), nb)
}

fn kernel_case(seed: u64) -> Result<f64, String> {
    let mut rng = Lcg64::new(0x9e37 + seed);
    let channels = random_channels(&mut rng, 24);
    let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
    let config = ModelConfig {
        channels: channels.clone(),
        hyper_channels: 1 + rng.below(5),
        context_features: 1 + rng.below(8),
        hyper_features: 1 + rng.below(8),
        hidden: 1 + rng.below(8),
        attention_dim: 1 + rng.below(6),
    };
    let base = ModelBundle::random(config.clone(), rng.next_u64()).map_err(|e| e.to_string())?;
    // Widen the raw scale range so the floor is exercised.
    let boost = rng.uniform(1.0, 6.0) as f32;
    let mut tensors = base.tensors();
    for (name, t) in tensors.iter_mut() {
        if name.starts_with("entropy.out") || name.ends_with("head.weight") {
            if let formats::TensorData::F32(v) = &mut t.data {
                v.iter_mut().for_each(|x| *x *= boost);
            }
        }
    }
    let bundle = ModelBundle::from_tensors(&tensors).map_err(|e| e.to_string())?;
    let wt = Weights(
        tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("meta"))
            .map(|(n, t)| (n.clone(), f64s(t)))
            .collect(),
    );

    let total = channels.total_channels();
    let block = 1 + rng.below(channels.num_blocks());
    let keep = channels.prefix_end(block - 1);
    let ydata: Vec<i32> = (0..total * h * w)
        .map(|_| rng.below(9) as i32 - 4)
        .collect();
    let y = LatentTensor::new(total, h, w, ydata).unwrap().masked(keep);
    let (hh, hw) = (h.div_ceil(4), w.div_ceil(4));
    let zdata: Vec<i32> = (0..config.hyper_channels * hh * hw)
        .map(|_| rng.below(7) as i32 - 3)
        .collect();
    let z = LatentTensor::new(config.hyper_channels, hh, hw, zdata).unwrap();

    let mut worst: f64 = 0.0;
    let p = bundle.hyper_features(&z, h, w).map_err(|e| e.to_string())?;
    let op: Field = (0..h * w)
        .map(|pos| {
            let zin: Vec<f64> = (0..config.hyper_channels)
                .map(|c| f64::from(z.get(c, pos / w / 4, pos % w / 4)))
                .collect();
            dense_at(
                wt.get("hyper.weight"),
                wt.get("hyper.bias"),
                &zin,
                config.hyper_features,
            )
        })
        .collect();
    worst = worst.max(max_abs(&p.data, &flatten(&op)));

    let c = bundle.context_features(&y).map_err(|e| e.to_string())?;
    let cw = wt.get("context.weight");
    let cb = wt.get("context.bias");
    let oc: Field = (0..h * w)
        .map(|pos| {
            let (py, px) = ((pos / w) as i64, (pos % w) as i64);
            (0..config.context_features)
                .map(|f| {
                    let mut acc = cb[f];
                    for ch in 0..total {
                        for ky in 0..5i64 {
                            for kx in 0..5i64 {
                                let (sy, sx) = (py + ky - 2, px + kx - 2);
                                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                    acc += cw
                                        [((f * total + ch) * 5 + ky as usize) * 5 + kx as usize]
                                        * f64::from(y.get(ch, sy as usize, sx as usize));
                                }
                            }
                        }
                    }
                    acc.max(0.0)
                })
                .collect()
        })
        .collect();
    worst = worst.max(max_abs(&c.data, &flatten(&oc)));

    let params = bundle
        .entropy_params(&p, &c, block)
        .map_err(|e| e.to_string())?;
    let range = channels.block_channels(block);
    let fused: Field = op
        .iter()
        .zip(&oc)
        .map(|(a, b)| [a.as_slice(), b].concat())
        .collect();
    let mut omu = vec![0.0; range.len() * h * w];
    let mut osig = omu.clone();
    for (pos, x) in fused.iter().enumerate() {
        let hidden: Vec<f64> = dense_at(
            wt.get("entropy.hidden.weight"),
            wt.get("entropy.hidden.bias"),
            x,
            config.hidden,
        )
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
        let out = dense_at(
            wt.get("entropy.out.weight"),
            wt.get("entropy.out.bias"),
            &hidden,
            2 * total,
        );
        for (j, ch) in range.clone().enumerate() {
            omu[j * h * w + pos] = out[ch];
            osig[j * h * w + pos] = oracle_scale(out[total + ch]);
        }
    }
    worst = worst.max(max_abs(&params.mu, &omu));
    worst = worst.max(max_abs(&params.sigma, &osig));
    ensure!(
        params.sigma.iter().all(|&s| s >= SIGMA_MIN),
        "base sigma below floor"
    );

    if block >= 2 {
        let (dmu, dsig) = bundle
            .delta_corrections(&p, &c, block)
            .map_err(|e| e.to_string())?;
        let (head, nb) = oracle_delta(&wt, &config, block, &fused, h, w);
        let flat = flatten(&head);
        let plane = h * w;
        worst = worst.max(max_abs(&dmu, &flat[..nb * plane]));
        worst = worst.max(max_abs(&dsig, &flat[nb * plane..]));
        let refined = bundle
            .delta_refine(&p, &c, &params, block)
            .map_err(|e| e.to_string())?;
        let rmu: Vec<f64> = omu
            .iter()
            .zip(&flat[..nb * plane])
            .map(|(a, b)| a + b)
            .collect();
        let rsig: Vec<f64> = osig
            .iter()
            .zip(&flat[nb * plane..])
            .map(|(a, b)| (a + b).max(SIGMA_MIN))
            .collect();
        worst = worst.max(max_abs(&refined.mu, &rmu));
        worst = worst.max(max_abs(&refined.sigma, &rsig));
        ensure!(
            refined.sigma.iter().all(|&s| s >= SIGMA_MIN),
            "refined sigma below floor"
        );
    }
    Ok(worst)
}

fn criterion_kernels() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let e = kernel_case(seed).map_err(|e| format!("case {seed}: {e}"))?;
        ensure!(e <= KERNEL_TOL, "case {seed}: max abs error {e:.3e}");
        worst = worst.max(e);
    }
    Ok(format!(
        "50 cases, max abs error {worst:.2e}, all scales >= {SIGMA_MIN}"
    ))
}

fn semcode(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_semcode"))
        .args(args)
        .current_dir(dir)
        .env_remove("SEMCODE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "`semcode {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(out.stdout)
}

fn pipeline(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let steps: &[(&str, &[&str])] = &[
        (
            "generate",
            &["fixtures", "generate", "--out", ".", "--seed", "11"],
        ),
        (
            "depthcut",
            &[
                "hierarchy",
                "depth-cut",
                "--tree",
                "taxonomy.tsv",
                "--k",
                "10",
                "--out",
                "depth.csv",
            ],
        ),
        (
            "kmeans",
            &[
                "hierarchy",
                "kmeans",
                "--embeddings",
                "embeddings.sptn",
                "--labels",
                "labels.txt",
                "--k",
                "10",
                "--out",
                "kmeans.csv",
                "--seed",
                "11",
            ],
        ),
        (
            "coherence",
            &[
                "hierarchy",
                "coherence",
                "--tree",
                "taxonomy.tsv",
                "--clustering",
                "kmeans.csv",
            ],
        ),
        (
            "encode",
            &[
                "codec",
                "encode",
                "--latent",
                "latent.sptn",
                "--hyper",
                "hyper.sptn",
                "--model",
                "model.scmb",
                "--out",
                "stream.spc",
            ],
        ),
        (
            "truncate_level",
            &[
                "codec",
                "truncate",
                "--in",
                "stream.spc",
                "--level",
                "2",
                "--out",
                "level2.spc",
            ],
        ),
        (
            "truncate_bytes",
            &[
                "codec",
                "truncate",
                "--in",
                "stream.spc",
                "--bytes",
                "6000",
                "--out",
                "cut.spc",
            ],
        ),
        (
            "decode_full",
            &[
                "codec",
                "decode",
                "--in",
                "stream.spc",
                "--model",
                "model.scmb",
                "--out",
                "full.sptn",
            ],
        ),
        (
            "decode_level",
            &[
                "codec",
                "decode",
                "--in",
                "level2.spc",
                "--model",
                "model.scmb",
                "--out",
                "level2.sptn",
            ],
        ),
        (
            "decode_cut",
            &[
                "codec",
                "decode",
                "--in",
                "cut.spc",
                "--model",
                "model.scmb",
                "--out",
                "cut.sptn",
            ],
        ),
        ("inspect", &["codec", "inspect", "--in", "stream.spc"]),
        (
            "bdrate",
            &["eval", "bdrate", "--a", "rd_a.csv", "--b", "rd_b.csv"],
        ),
        (
            "score",
            &[
                "eval",
                "score",
                "--predictions",
                "predictions.csv",
                "--tree",
                "taxonomy.tsv",
                "--clusterings",
                "depth.csv,kmeans.csv,kmeans.csv",
            ],
        ),
    ];
    let mut artifacts = BTreeMap::new();
    for (name, args) in steps {
        artifacts.insert(format!("stdout.{name}"), semcode(dir, args)?);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        artifacts.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(artifacts)
}

fn criterion_determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    ensure!(first.keys().eq(second.keys()), "artifact sets differ");
    for (name, bytes) in &first {
        ensure!(&second[name] == bytes, "{name} differs between runs");
    }
    let full = std::fs::read(a.path().join("full.sptn")).unwrap();
    let latent = std::fs::read(a.path().join("latent.sptn")).unwrap();
    ensure!(full == latent, "pipeline decode is not lossless");
    Ok(format!("{} artifacts byte-identical", first.len()))
}

fn main() {
    let codec = codec_trials();
    let criteria: Vec<(&str, Check)> = vec![
        ("round-trip losslessness", criterion_roundtrip(&codec)),
        ("prefix and truncation exactness", criterion_prefix(&codec)),
        ("rate fidelity", criterion_rate(&codec)),
        ("zero-refinement equivalence", criterion_zero_delta(&codec)),
        ("WUP oracle", criterion_wup()),
        ("coherence direction", criterion_coherence()),
        ("k-means micro optimality", criterion_kmeans()),
        ("BD-rate sanity", criterion_bdrate()),
        ("network kernel correctness", criterion_kernels()),
        ("pipeline determinism", criterion_determinism()),
    ];
    let mut failed = 0;
    for (i, (name, result)) in criteria.iter().enumerate() {
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
