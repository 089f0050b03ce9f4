use cfcal_core::bench::{run_bench, BenchParams};

fn median_seconds(m: usize) -> f64 {
    let mut t: Vec<f64> = (0..5)
        .map(|_| {
            run_bench(BenchParams {
                n_images: 200,
                m_contexts: m,
                ..BenchParams::default()
            })
            .unwrap()
            .wall_seconds
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[2]
}

#[test]
fn doubling_contexts_roughly_doubles_time() {
    let ratio = median_seconds(200) / median_seconds(100);
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio:.2}");
}
