use assocmem::theory::{entropic_term, g_bounds, EtaSamples};

const P: usize = 10_000;

#[test]
fn energetic_within_bounds_and_decreasing() {
    let samples = EtaSamples::new(P, 16, 21).unwrap();
    let lp = (P as f64).ln();
    let slack = 5.0 * lp.ln() / lp;
    let mut prev = 0.0;
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let (g, se) = samples.energetic(t).unwrap();
        let (lower, _) = g_bounds(t, 1.0).unwrap();
        assert!(g >= lower - 3.0 * se - slack && g <= 0.0, "t={t}: {g} vs {lower}");
        assert!(g < prev, "t={t}");
        prev = g;
    }
    let (g, _) = samples.energetic(0.5).unwrap();
    assert!(g <= -0.5 + slack);
    let (g3, s3) = samples.energetic(0.3).unwrap();
    let (g7, s7) = samples.energetic(0.7).unwrap();
    assert!(g3 - g7 > 3.0 * (s3 * s3 + s7 * s7).sqrt());
}

#[test]
fn free_entropy_unimodal_on_grid() {
    let samples = EtaSamples::new(P, 8, 4).unwrap();
    let phi: Vec<f64> = (0..20)
        .map(|i| {
            let q = i as f64 * 0.05;
            entropic_term(q) + 0.3 * samples.energetic(q).unwrap().0
        })
        .collect();
    let k = phi
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!(phi[..=k].windows(2).all(|w| w[1] <= w[0]), "{phi:?}");
    assert!(phi[k..].windows(2).all(|w| w[1] >= w[0]), "{phi:?}");
}
