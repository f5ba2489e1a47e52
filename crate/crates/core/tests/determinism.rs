//! Thread-count independence: the parallel kernels split work over
//! independent output rows only, so a single-thread pool must produce
//! bit-identical results to the default pool.

use edit_core::mechanism::{run_mechanism, MechanismInputs};
use edit_core::weights::generate;
use edit_core::{AttentionConfig, Mechanism};

fn bits(t: &edit_core::Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn single_thread_pool_matches_default_pool_bitwise() {
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    for mech in [
        Mechanism::Sdpa,
        Mechanism::Edit,
        Mechanism::Hybrid,
        Mechanism::Joint,
    ] {
        let cfg = AttentionConfig::new(mech, 32, 4, 12, 12, 8).unwrap();
        let store = generate(&cfg, 5).unwrap();
        let inputs = MechanismInputs::seeded(&cfg, 6).unwrap();
        let wide = run_mechanism(&cfg, &store, &inputs).unwrap();
        let narrow = single
            .install(|| run_mechanism(&cfg, &store, &inputs))
            .unwrap();
        assert_eq!(bits(&wide.image), bits(&narrow.image), "{mech:?}");
        match (wide.prompt, narrow.prompt) {
            (Some(a), Some(b)) => assert_eq!(bits(&a), bits(&b), "{mech:?}"),
            (None, None) => {}
            _ => panic!("prompt presence differs"),
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let cfg = AttentionConfig::new(Mechanism::Edit, 32, 4, 10, 14, 0).unwrap();
    let store = generate(&cfg, 9).unwrap();
    let inputs = MechanismInputs::seeded(&cfg, 10).unwrap();
    let a = run_mechanism(&cfg, &store, &inputs).unwrap();
    let b = run_mechanism(&cfg, &store, &inputs).unwrap();
    assert_eq!(bits(&a.image), bits(&b.image));
}
