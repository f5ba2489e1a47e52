//! Oracle-equivalence suites behind `edit-bench verify`.
//!
//! Every suite draws seeded instances, compares a production path against
//! an independent reference and reports its worst error. The whole report
//! is a pure function of the seed.

use edit_core::attention::{
    generalized_attention, linear_attention, sdpa, EpsPolicy, Qkv, SimilarityFn,
};
use edit_core::conv::{conv2d, group_norm, Conv2DParams, NormParams};
use edit_core::edit::{
    conv_fusion, edit_keys_values, ConvFusionWeights, SpatialCompressorWeights,
};
use edit_core::feature_maps::{LinFusionMap, ReluLinearMap, LEAKY_SLOPE, NORM_EPSILON};
use edit_core::grid::ImageTokenGrid;
use edit_core::mmedit::{
    eta, eta_lin, hybrid_attention_blocks, joint_attention_decomposed, joint_attention_direct,
    EtaMode, ImageMapKind, JointQkv,
};
use edit_core::oracle;
use edit_core::sampling::{qkv_instance, uniform_tensor, SeedStream};
use edit_core::tensor::{matmul, relu, Tensor};
use edit_core::weights::{generate, Provenance, WeightStore};
use edit_core::{AttentionConfig, Mechanism, Result};
use rand_chacha::ChaCha8Rng;

/// Worst error of one suite, in the metric stated by its name.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_err: f64,
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn rng_dims(rng: &mut ChaCha8Rng, hi: usize) -> usize {
    use rand::Rng;
    rng.gen_range(1..=hi)
}

fn suite_matmul(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = seeds.substream(1000 + i);
        let (m, k, n) = (rng_dims(&mut rng, 8), rng_dims(&mut rng, 8), rng_dims(&mut rng, 8));
        let a = uniform_tensor(&mut rng, &[m, k], -3.0, 3.0);
        let b = uniform_tensor(&mut rng, &[k, n], -3.0, 3.0);
        worst = worst.max(max_abs_diff(&matmul(&a, &b)?, &oracle::oracle_matmul(&a, &b)?));
    }
    Ok(worst)
}

fn suite_conv2d(seeds: &SeedStream) -> Result<f64> {
    use rand::Rng;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = seeds.substream(2000 + i);
        let c_in = rng_dims(&mut rng, 4);
        let depthwise = rng.gen_bool(0.5);
        let c_out = if depthwise { c_in } else { rng_dims(&mut rng, 4) };
        let (h, w) = (rng_dims(&mut rng, 8), rng_dims(&mut rng, 8));
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
        let kdims = if depthwise {
            vec![c_out, 1, k, k]
        } else {
            vec![c_out, c_in, k, k]
        };
        let p = Conv2DParams::new(
            uniform_tensor(&mut rng, &kdims, -1.0, 1.0),
            uniform_tensor(&mut rng, &[c_out], -1.0, 1.0),
            stride,
            depthwise,
        )?;
        let x = uniform_tensor(&mut rng, &[c_in, h, w], -3.0, 3.0);
        worst = worst.max(max_abs_diff(&conv2d(&x, &p)?, &oracle::oracle_conv2d(&x, &p)?));
    }
    Ok(worst)
}

fn suite_group_norm(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = seeds.substream(3000 + i);
        let groups = rng_dims(&mut rng, 4);
        let c = groups * rng_dims(&mut rng, 3);
        let (h, w) = (rng_dims(&mut rng, 6), rng_dims(&mut rng, 6));
        let p = NormParams::new(
            uniform_tensor(&mut rng, &[c], 0.5, 1.5),
            uniform_tensor(&mut rng, &[c], -0.5, 0.5),
            groups,
            NORM_EPSILON,
        )?;
        let x = uniform_tensor(&mut rng, &[c, h, w], -3.0, 3.0);
        worst = worst.max(max_abs_diff(&group_norm(&x, &p)?, &oracle::oracle_group_norm(&x, &p)?));
    }
    Ok(worst)
}

fn sdpa_family(rng: &mut ChaCha8Rng) -> Qkv {
    let n_q = rng_dims(rng, 16);
    let n_k = rng_dims(rng, 64);
    let d = [4, 8, 16, 32][rng_dims(rng, 4) - 1];
    qkv_instance(rng, n_q, n_k, d, -3.0, 3.0)
}

fn suite_sdpa_vs_generalized(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..50 {
        let mut rng = seeds.substream(4000 + i);
        let qkv = sdpa_family(&mut rng);
        let a = sdpa(&qkv)?;
        let b = generalized_attention(&qkv, SimilarityFn::ExpScaledDot, EpsPolicy::Strict)?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok(worst)
}

fn suite_sdpa_vs_oracle(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..50 {
        let mut rng = seeds.substream(5000 + i);
        let qkv = sdpa_family(&mut rng);
        let a = sdpa(&qkv)?;
        let b = oracle::oracle_attention(&qkv, SimilarityFn::ExpScaledDot)?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok(worst)
}

/// Relative error of the reordered linear form against the double-loop
/// oracle, over rows whose denominator is at least 1e-3.
fn suite_linear_vs_oracle(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = seeds.substream(6000 + i);
        let n = rng_dims(&mut rng, 64);
        let d = rng_dims(&mut rng, 16);
        let n_q = rng_dims(&mut rng, 16);
        let qkv = qkv_instance(&mut rng, n_q, n, d, 0.0, 3.0);
        let got = linear_attention(&qkv, EpsPolicy::Stabilize)?;
        let want = oracle::oracle_attention(&qkv, SimilarityFn::Dot)?;
        // Per-row denominator for the validity filter.
        let mut z = vec![0.0f64; d];
        for j in 0..n {
            for c in 0..d {
                z[c] += qkv.k.row(j)[c] as f64;
            }
        }
        for r in 0..n_q {
            let den: f64 = qkv.q.row(r).iter().zip(&z).map(|(q, z)| *q as f64 * z).sum();
            if den < 1e-3 {
                continue;
            }
            for c in 0..want.cols() {
                let (g, w) = (got.row(r)[c] as f64, want.row(r)[c] as f64);
                worst = worst.max((g - w).abs() / w.abs().max(1e-3));
            }
        }
    }
    Ok(worst)
}

pub fn joint_instance(rng: &mut ChaCha8Rng, n_i: usize, n_p: usize, d: usize) -> JointQkv {
    JointQkv {
        q_img: uniform_tensor(rng, &[n_i, d], -3.0, 3.0),
        k_img: uniform_tensor(rng, &[n_i, d], -3.0, 3.0),
        v_img: uniform_tensor(rng, &[n_i, d], -3.0, 3.0),
        q_prm: uniform_tensor(rng, &[n_p, d], -3.0, 3.0),
        k_prm: uniform_tensor(rng, &[n_p, d], -3.0, 3.0),
        v_prm: uniform_tensor(rng, &[n_p, d], -3.0, 3.0),
        image_maps: ImageMapKind::PlainLinear,
    }
}

fn suite_decomposition(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = seeds.substream(7000 + i);
        let n_i = [1, 4, 16, 64][(i % 4) as usize];
        let n_p = [0, 1, 5, 16][((i / 4) % 4) as usize];
        let d = [4, 8, 16][(i % 3) as usize];
        let j = joint_instance(&mut rng, n_i, n_p, d);
        let (di, dp) = joint_attention_direct(&j)?;
        let (xi, xp) = joint_attention_decomposed(&j)?;
        worst = worst.max(max_abs_diff(&di, &xi)).max(max_abs_diff(&dp, &xp));
    }
    Ok(worst)
}

fn suite_joint_vs_oracle(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut rng = seeds.substream(8000 + i);
        let j = joint_instance(&mut rng, 1 + (i as usize % 24), (i as usize) % 9, 8);
        let (di, dp) = joint_attention_direct(&j)?;
        let (oi, op) = oracle::oracle_joint(&j)?;
        worst = worst.max(max_abs_diff(&di, &oi)).max(max_abs_diff(&dp, &op));
    }
    Ok(worst)
}

fn suite_hybrid_reduction(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut rng = seeds.substream(9000 + i);
        let n_i = [1, 4, 16, 64][(i % 4) as usize];
        let n_p = [0, 1, 5, 16][((i / 4) % 4) as usize];
        let j = joint_instance(&mut rng, n_i, n_p, 8);
        let (hi, hp) = hybrid_attention_blocks(&j, EtaMode::ExactSoftmax, EpsPolicy::Stabilize)?;
        let (di, dp) = joint_attention_direct(&j)?;
        worst = worst.max(max_abs_diff(&di, &hi)).max(max_abs_diff(&dp, &hp));
    }
    Ok(worst)
}

fn suite_eta_complement(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..200 {
        let mut rng = seeds.substream(10_000 + i);
        let d = rng_dims(&mut rng, 16);
        let q = uniform_tensor(&mut rng, &[1, d], -3.0, 3.0);
        let (n1, n2) = (rng_dims(&mut rng, 16), rng_dims(&mut rng, 16));
        let k1 = uniform_tensor(&mut rng, &[n1, d], -3.0, 3.0);
        let k2 = uniform_tensor(&mut rng, &[n2, d], -3.0, 3.0);
        let a = eta(q.row(0), &k1, &k2)? as f64;
        let b = eta(q.row(0), &k2, &k1)? as f64;
        worst = worst.max((a + b - 1.0).abs());
    }
    Ok(worst)
}

fn suite_eta_lin(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = seeds.substream(11_000 + i);
        let d = rng_dims(&mut rng, 16);
        let q = uniform_tensor(&mut rng, &[1, d], 0.0, 2.0);
        let (n1, n2) = (rng_dims(&mut rng, 12), rng_dims(&mut rng, 8));
        let k1 = uniform_tensor(&mut rng, &[n1, d], 0.0, 2.0);
        let k2 = uniform_tensor(&mut rng, &[n2, d], -2.0, 2.0);
        let got = eta_lin(q.row(0), &k1, &k2, EpsPolicy::Stabilize, 0)? as f64;
        // Scalar double-loop recomputation in f64.
        let mut lin = 0.0f64;
        for j in 0..k1.rows() {
            for c in 0..d {
                lin += q.row(0)[c] as f64 * k1.row(j)[c] as f64;
            }
        }
        let mut em = 0.0f64;
        for j in 0..k2.rows() {
            let mut s = 0.0f64;
            for c in 0..d {
                s += q.row(0)[c] as f64 * k2.row(j)[c] as f64;
            }
            em += (s / (d as f64).sqrt()).exp();
        }
        let want = lin / (lin + em + 1e-6);
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}

fn suite_conv_fusion_composition(seeds: &SeedStream) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..25u64 {
        let mut rng = seeds.substream(12_000 + i);
        let d = [4, 8][(i % 2) as usize];
        let (h, w) = (1 + (i as usize % 5), 1 + ((i as usize / 5) % 5));
        let cfg = AttentionConfig::new(Mechanism::Edit, d, 1, h, w, 0)?;
        let store = generate(&cfg, 5000 + i)?;
        let cf = ConvFusionWeights::from_store(&store)?;
        let grid = ImageTokenGrid::new(uniform_tensor(&mut rng, &[h * w, d], -3.0, 3.0), h, w)?;
        let got = conv_fusion(&grid, &cf)?;

        let spatial = grid.to_spatial();
        let mut t = oracle::oracle_conv2d(&spatial, &cf.compress)?;
        t.map_inplace(|v| edit_core::tensor::leaky_relu(v, LEAKY_SLOPE));
        let t = oracle::oracle_group_norm(&t, &cf.norm)?;
        let mut t = oracle::oracle_conv2d(&t, &cf.expand)?;
        for (o, r) in t.data_mut().iter_mut().zip(spatial.data()) {
            *o = relu(*o + *r);
        }
        let want = ImageTokenGrid::from_spatial(&t)?;
        worst = worst.max(max_abs_diff(&got, want.tokens()));
    }
    Ok(worst)
}

fn suite_token_count_law(seeds: &SeedStream) -> Result<f64> {
    let mut rng = seeds.substream(13_000);
    let d = 4;
    let cfg = AttentionConfig::new(Mechanism::Edit, d, 1, 4, 4, 0)?;
    let store = generate(&cfg, 17)?;
    let sc = SpatialCompressorWeights::from_store(&store)?;
    for h in 1..=9usize {
        for w in 1..=9usize {
            let grid = ImageTokenGrid::new(uniform_tensor(&mut rng, &[h * w, d], -3.0, 3.0), h, w)?;
            let (k, v) = edit_keys_values(&grid, &sc)?;
            let want = h.div_ceil(2) * w.div_ceil(2);
            if k.rows() != want || v.rows() != want {
                return Ok(1.0);
            }
            if h % 2 == 0 && w % 2 == 0 && k.rows() != h * w / 4 {
                return Ok(1.0);
            }
        }
    }
    Ok(0.0)
}

fn suite_nonnegativity(seeds: &SeedStream) -> Result<f64> {
    let d = 8;
    let cfg = AttentionConfig::new(Mechanism::Edit, d, 1, 4, 4, 0)?;
    let lf_cfg = AttentionConfig::new(Mechanism::LinFusion, d, 1, 4, 4, 0)?;
    let sana_cfg = AttentionConfig::new(Mechanism::Sana, d, 1, 4, 4, 0)?;
    let mut worst_violation = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = seeds.substream(14_000 + i);
        let store = generate(&cfg, 100 + (i % 10))?;
        let grid = ImageTokenGrid::new(uniform_tensor(&mut rng, &[16, d], -5.0, 5.0), 4, 4)?;
        let q = conv_fusion(&grid, &ConvFusionWeights::from_store(&store)?)?;
        let (k, _) = edit_keys_values(&grid, &SpatialCompressorWeights::from_store(&store)?)?;
        let sana = ReluLinearMap::from_store(&generate(&sana_cfg, 100 + (i % 10))?, "q_map")?
            .apply(grid.tokens())?;
        let lf = LinFusionMap::from_store(&generate(&lf_cfg, 100 + (i % 10))?, "q_map")?
            .apply(grid.tokens())?;
        for t in [&q, &k, &sana, &lf] {
            let min = t.data().iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            worst_violation = worst_violation.max((-min).max(0.0));
        }
    }
    Ok(worst_violation)
}

fn suite_weights_roundtrip(seeds: &SeedStream) -> Result<f64> {
    use rand::Rng;
    for i in 0..20u64 {
        let mut rng = seeds.substream(15_000 + i);
        let mut store = WeightStore::new(Provenance::Seeded(i));
        let tensors = 1 + (i as usize % 6);
        for t in 0..tensors {
            let ndim = 1 + (t % 3);
            let dims: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..5)).collect();
            store.insert(format!("t.{t}"), uniform_tensor(&mut rng, &dims, -100.0, 100.0))?;
        }
        let mut buf = Vec::new();
        store.write_to(&mut buf)?;
        let back = WeightStore::read_from(&mut buf.as_slice(), Provenance::Seeded(i))?;
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            let same_bits = t1
                .data()
                .iter()
                .zip(t2.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if n1 != n2 || t1.dims() != t2.dims() || !same_bits {
                return Ok(1.0);
            }
        }
    }
    Ok(0.0)
}

/// Runs every suite with substreams of `seed`.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    let seeds = SeedStream::new(seed);
    let suites: Vec<(&'static str, fn(&SeedStream) -> Result<f64>)> = vec![
        ("matmul-oracle (abs)", suite_matmul),
        ("conv2d-oracle (abs)", suite_conv2d),
        ("groupnorm-oracle (abs)", suite_group_norm),
        ("sdpa-vs-generalized (abs)", suite_sdpa_vs_generalized),
        ("sdpa-vs-oracle (abs)", suite_sdpa_vs_oracle),
        ("linear-vs-oracle-dot (rel)", suite_linear_vs_oracle),
        ("joint-decomposition (abs)", suite_decomposition),
        ("joint-vs-oracle (abs)", suite_joint_vs_oracle),
        ("hybrid-softmax-reduction (abs)", suite_hybrid_reduction),
        ("eta-complement (abs)", suite_eta_complement),
        ("eta-lin-recompute (abs)", suite_eta_lin),
        ("convfusion-composition (abs)", suite_conv_fusion_composition),
        ("edit-token-count-law (exact)", suite_token_count_law),
        ("nonnegativity (violation)", suite_nonnegativity),
        ("weights-roundtrip (exact)", suite_weights_roundtrip),
    ];
    let mut results = Vec::with_capacity(suites.len());
    for (name, f) in suites {
        results.push(SuiteResult {
            name,
            max_err: f(&seeds)?,
        });
    }
    Ok(results)
}

/// Formats the deterministic report; returns it with the overall verdict.
pub fn report(results: &[SuiteResult], seed: u64, tolerance: f64) -> (String, bool) {
    let mut out = String::new();
    out.push_str(&format!("verification report  seed={seed}  tolerance={tolerance:.3e}\n"));
    let mut all_ok = true;
    for r in results {
        let ok = r.max_err <= tolerance;
        all_ok &= ok;
        out.push_str(&format!(
            "  {:<34} max_err={:<12} {}\n",
            r.name,
            format!("{:.3e}", r.max_err),
            if ok { "PASS" } else { "FAIL" }
        ));
    }
    out.push_str(if all_ok {
        "all suites passed\n"
    } else {
        "VERIFICATION FAILED\n"
    });
    (out, all_ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes_at_spec_tolerance() {
        let results = run_all(42).unwrap();
        let (text, ok) = report(&results, 42, 1e-5);
        assert!(ok, "{text}");
        // Floating-point suites have nonzero error, so an impossible
        // tolerance must fail.
        let (_, zero_ok) = report(&results, 42, 0.0);
        assert!(!zero_ok);
    }

    #[test]
    fn report_is_deterministic_for_fixed_seed() {
        let a = report(&run_all(7).unwrap(), 7, 1e-5).0;
        let b = report(&run_all(7).unwrap(), 7, 1e-5).0;
        assert_eq!(a, b);
    }
}
