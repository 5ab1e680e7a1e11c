use hybridvc_web::{contrastive_view, flow_view, mel_view};

#[test]
fn flow_view_moves_points_and_depends_on_style() {
    let a = flow_view(3, 0.0, 0.0, 200);
    assert_eq!((a.prior.len(), a.latent.len(), a.log_det.len()), (200, 200, 200));
    assert!(a.log_det.iter().all(|v| v.is_finite()));
    assert!(a.prior.iter().zip(&a.latent).any(|(p, l)| (p[0] - l[0]).abs() > 1e-3));
    let b = flow_view(3, 1.5, -1.0, 200);
    assert_eq!(a.prior, b.prior);
    assert_ne!(a.latent, b.latent);
    // 4 couplings with |log-scale| <= 2 bound the inverse log-det by 8 per point
    assert!(a.log_det.iter().all(|v| v.abs() <= 8.0));
}

#[test]
fn contrastive_view_tracks_alignment() {
    let aligned = contrastive_view(1, 256, 8, 10, 0.07, 1.0).unwrap();
    assert!((aligned.positive_cosine - 1.0).abs() < 1e-12);
    assert_eq!(aligned.negative_cosines.len(), 10);
    let random = contrastive_view(1, 256, 8, 10, 0.07, 0.0).unwrap();
    assert!(aligned.loss < random.loss);
    for p in &aligned.permutations {
        let mut sorted = p.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_ne!(p, &sorted);
    }
    assert!(contrastive_view(1, 250, 8, 10, 0.07, 0.5).is_err());
    assert!(contrastive_view(1, 256, 8, 10, 0.0, 0.5).is_err());
    // K = 2 admits a single non-identity order
    assert!(contrastive_view(1, 256, 2, 2, 0.07, 0.5).is_err());
}

#[test]
fn mel_view_identity_ratio_and_bounds() {
    let v = mel_view(0, 2, 1, 1.0).unwrap();
    assert_eq!(v.bins, 80);
    assert_eq!(v.original.len(), v.frames * 80);
    assert_eq!(v.original, v.augmented);
    let w = mel_view(0, 2, 1, 0.9).unwrap();
    assert_ne!(w.original, w.augmented);
    assert!(mel_view(0, 16, 0, 1.0).is_err());
    assert!(mel_view(0, 0, 0, 2.0).is_err());
}
