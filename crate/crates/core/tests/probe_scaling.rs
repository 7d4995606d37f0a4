// Timing ratios of the complexity probe. One test in its own binary so
// nothing else competes for the core while it runs.

use tensorformer::attention::{complexity_probe, AttentionKind, ProbeConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn cfg() -> ProbeConfig {
    ProbeConfig {
        anchors: 64,
        reps: 5,
        seed: 0,
    }
}

fn time(kind: AttentionKind, k: usize, d: usize) -> f64 {
    complexity_probe(kind, &[k], &[d], &cfg()).unwrap()[0].time_ns as f64
}

#[test]
fn time_scales_with_d_squared_and_k() {
    let r = time(AttentionKind::NormalizedMatrix, 16, 64) / time(AttentionKind::NormalizedMatrix, 16, 32);
    assert!((3.0..=6.0).contains(&r), "d 32 -> 64 ratio {r:.2}");

    // Doubling k roughly doubles every kernel.
    for kind in AttentionKind::ALL {
        let r = time(kind, 24, 16) / time(kind, 12, 16);
        assert!((1.5..=3.0).contains(&r), "{kind}: k 12 -> 24 ratio {r:.2}");
    }
}
