use chrono::{TimeZone, Utc};
use jndloc_core::critmap::{self, ClickSet, CriticalityMap};
use jndloc_core::goldgen::{self, GoldSpec, GoldValidation};
use jndloc_core::imaging::{self, CodecId, DistortionLevel, RasterImage};
use jndloc_core::protocol::{self, GoldStats, LifecyclePolicy, Response, WorkerRecord, WorkerState};
use jndloc_core::qc::{self, LoggedResponse, ResponseLog};
use proptest::prelude::*;

fn lvl(d: u8) -> DistortionLevel {
    DistortionLevel::new(d as i64).unwrap()
}

fn spec_with(centers: [[u32; 2]; 3], range: [u8; 2]) -> GoldSpec {
    GoldSpec {
        source_id: "g".into(),
        codec: CodecId::Jpeg,
        width: 400,
        height: 400,
        centers,
        sigma_region: 35.0,
        sigmoid_center: (range[0] as f64 + range[1] as f64) / 2.0,
        sigmoid_scale: 4.0,
        acceptance_band: [0.25, 0.75],
        pjnd_range: range,
        seed: 0,
    }
}

#[test]
fn level_maps_are_exact_and_monotone() {
    let mut prev_qf = u8::MAX;
    let mut prev_qp = 0;
    for d in 1..=100u8 {
        let qf = imaging::level_to_jpeg_qf(lvl(d)).unwrap();
        let qp = imaging::level_to_bpg_qp(lvl(d)).unwrap();
        assert_eq!(qf as u32 + d as u32, 101);
        assert!((1..=50).contains(&qp));
        assert!(qf < prev_qf);
        assert!(qp >= prev_qp);
        prev_qf = qf;
        prev_qp = qp;
    }
}

#[test]
fn ladder_build_is_deterministic_and_keeps_dimensions() {
    let src = imaging::synthetic_image(40, 24, 3);
    let a = imaging::build_ladder("s", &src, CodecId::Jpeg, &imaging::JpegAdapter).unwrap();
    let b = imaging::build_ladder("s", &src, CodecId::Jpeg, &imaging::JpegAdapter).unwrap();
    assert_eq!(a.frames().len(), imaging::LADDER_LEN);
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        assert_eq!(fa.samples(), fb.samples());
        assert_eq!((fa.width(), fa.height()), (40, 24));
    }
    assert_eq!(a.frame(DistortionLevel::SOURCE).samples(), src.samples());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blend_field_peaks_at_one(
        cx in proptest::array::uniform3(0u32..120),
        cy in proptest::array::uniform3(0u32..90),
        sigma in 2.0f64..40.0,
    ) {
        let centers = [[cx[0], cy[0]], [cx[1], cy[1]], [cx[2], cy[2]]];
        let w = goldgen::blend_weight_field(&centers, sigma, 120, 90).unwrap();
        prop_assert!((w.max() - 1.0).abs() < 1e-9);
        prop_assert!(w.values().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn blended_pixels_stay_between_inputs(seed_a in 0u64..1000, seed_b in 0u64..1000, sigma in 3.0f64..30.0) {
        let a = imaging::synthetic_image(48, 32, seed_a);
        let b = imaging::synthetic_image(48, 32, seed_b);
        let w = goldgen::blend_weight_field(&[[5, 5], [40, 10], [20, 28]], sigma, 48, 32).unwrap();
        let out = goldgen::synthesize_gold_frame(&a, &b, &w).unwrap();
        for ((o, x), y) in out.samples().iter().zip(a.samples()).zip(b.samples()) {
            prop_assert!(*x.min(y) <= *o && *o <= *x.max(y));
        }
    }

    #[test]
    fn gold_validation_ignores_click_and_center_order(
        clicks in proptest::array::uniform3(proptest::array::uniform2(0u32..400)),
        centers in proptest::array::uniform3(proptest::array::uniform2(0u32..400)),
        d in 1u8..=100,
        pc in 0usize..6,
        pk in 0usize..6,
    ) {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let spec = spec_with(centers, [30, 40]);
        let base = goldgen::validate_clicks_and_level(lvl(d), &clicks, &spec).unwrap();
        let p = PERMS[pc];
        let q = PERMS[pk];
        let clicks2 = [clicks[p[0]], clicks[p[1]], clicks[p[2]]];
        let spec2 = spec_with([centers[q[0]], centers[q[1]], centers[q[2]]], [30, 40]);
        prop_assert_eq!(base, goldgen::validate_clicks_and_level(lvl(d), &clicks2, &spec2).unwrap());
    }

    #[test]
    fn sigmoid_band_symmetric_about_center(d0 in 10.0f64..90.0, s in 0.5f64..10.0) {
        let (lo, hi) = goldgen::sigmoid_band(d0, s, 0.25, 0.75);
        prop_assert!(((d0 - lo) - (hi - d0)).abs() < 1e-9);
    }

    #[test]
    fn translated_clicks_translate_argmax(
        pts in proptest::collection::vec((60u32..100, 60u32..100), 1..6),
        dx in 0u32..20,
        dy in 0u32..20,
    ) {
        let mut a = ClickSet::new("a");
        let mut b = ClickSet::new("b");
        for (x, y) in &pts {
            a.push(*x, *y, "w");
            b.push(x + dx, y + dy, "w");
        }
        let ma = critmap::aggregate_clicks_to_map(&a, 6.0, 200, 200).unwrap();
        let mb = critmap::aggregate_clicks_to_map(&b, 6.0, 200, 200).unwrap();
        let (ax, ay) = ma.argmax();
        let (bx, by) = mb.argmax();
        prop_assert_eq!((ax + dx, ay + dy), (bx, by));
        prop_assert!((ma.max_value() - 1.0).abs() < 1e-6);
        prop_assert!((mb.max_value() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn window_sum_monotone(vals in proptest::collection::vec(0.0f32..1.0, 100), extra in proptest::collection::vec(0.0f32..1.0, 100), cx in -3i64..13, cy in -3i64..13) {
        let small = CriticalityMap::from_values(10, 10, vals.clone()).unwrap();
        let big = CriticalityMap::from_values(10, 10, vals.iter().zip(&extra).map(|(a, b)| a + b).collect()).unwrap();
        prop_assert!(critmap::window_sum(&big, cx, cy, 7).unwrap() >= critmap::window_sum(&small, cx, cy, 7).unwrap());
    }

    #[test]
    fn modes_lie_near_discrete_maxima(
        bumps in proptest::collection::vec((0.0f64..24.0, 0.0f64..24.0, 0.2f64..1.0, 1.0f64..2.0), 1..5),
        bw in 2.0f64..4.0,
    ) {
        // Criticality maps are blurred, so bumps are at least as wide as the kernel.
        let map = CriticalityMap::from_fn(24, 24, |x, y| {
            bumps
                .iter()
                .map(|(bx, by, a, k)| {
                    let s = k * bw;
                    a * (-((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum()
        });
        let maxima = critmap::local_maxima(&map);
        for m in critmap::mean_shift_modes(&map, bw).unwrap() {
            let near = maxima
                .iter()
                .any(|(x, y)| ((*x as f64 - m.x).powi(2) + (*y as f64 - m.y).powi(2)).sqrt() <= bw / 2.0 + 1e-9);
            prop_assert!(near, "mode ({}, {}) far from maxima {:?}", m.x, m.y, maxima);
        }
    }

    #[test]
    fn accuracy_bounded_and_monotone(a in 1u32..50, b in 0u32..50, c in 0u32..50) {
        let (b, c) = (b.min(a), c.min(a));
        let acc = protocol::accuracy(a, b, c).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        if b < a {
            prop_assert!(protocol::accuracy(a, b + 1, c).unwrap() >= acc);
        }
        if c < a {
            prop_assert!(protocol::accuracy(a, b, c + 1).unwrap() >= acc);
        }
    }

    #[test]
    fn lifecycle_never_overflows(events in proptest::collection::vec((any::<bool>(), 0u8..=3), 1..60)) {
        let mut w = WorkerRecord::new("w");
        w.transition(WorkerState::InQualification).unwrap();
        w.transition(WorkerState::Qualified).unwrap();
        let policy = LifecyclePolicy::default();
        for (ok, hits) in events {
            match protocol::on_study_hit_completed(&w, &GoldValidation::new(ok, hits), &policy) {
                Ok(next) => w = next,
                Err(_) => prop_assert!(w.state.is_final()),
            }
            let GoldStats { a, b, c } = w.gold_stats;
            prop_assert!(b <= a && c <= a);
            prop_assert!(w.study_hits_completed <= policy.max_hits);
        }
    }

    #[test]
    fn quiz_grade_ignores_order(v in proptest::collection::vec((any::<bool>(), 0u8..=3), 10), seed in any::<u64>()) {
        use rand::SeedableRng;
        let vals: Vec<GoldValidation> = v.iter().map(|(ok, h)| GoldValidation::new(*ok, *h)).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shuffled = protocol::shuffled(&vals, &mut rng);
        prop_assert_eq!(
            protocol::grade_validations("w", &vals, 0.7).unwrap(),
            protocol::grade_validations("w", &shuffled, 0.7).unwrap()
        );
    }

    #[test]
    fn assembled_hits_never_repeat_images(n in 10usize..60, golds in 1usize..5, seed in any::<u64>()) {
        use rand::SeedableRng;
        let study: Vec<protocol::PoolEntry> = (0..n)
            .map(|i| protocol::PoolEntry { image_ref: format!("s{i}"), codec: CodecId::Jpeg, collected: 0 })
            .collect();
        let gold: Vec<protocol::PoolEntry> = (0..golds)
            .map(|i| protocol::PoolEntry { image_ref: format!("g{i}"), codec: CodecId::Jpeg, collected: 0 })
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (hits, leftover) = protocol::plan_hits(&study, &gold, 50, &mut rng).unwrap();
        prop_assert_eq!(hits.len(), n / 10);
        prop_assert_eq!(leftover.len(), n % 10);
        let mut seen = std::collections::BTreeSet::new();
        for h in &hits {
            h.check().unwrap();
            for i in h.items.iter().filter(|i| !i.gold) {
                prop_assert!(seen.insert(i.image_ref.clone()));
            }
        }
    }

    #[test]
    fn srocc_invariant_under_monotone_maps(
        x in proptest::collection::vec(-100.0f64..100.0, 3..40),
        y in proptest::collection::vec(-100.0f64..100.0, 40),
        k in 0.1f64..5.0,
    ) {
        let y = &y[..x.len()];
        if let Ok(r) = qc::srocc(&x, y) {
            let fx: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() * k + 3.0).collect();
            let fy: Vec<f64> = y.iter().map(|v| v.powi(3) - 7.0).collect();
            prop_assert!((qc::srocc(&fx, &fy).unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn linfit_recovers_planted_line(
        x in proptest::collection::vec(-50.0f64..50.0, 2..50),
        a in -10.0f64..10.0,
        b in -100.0f64..100.0,
    ) {
        if qc::linfit(&x, &x).is_ok() {
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let (s, i) = qc::linfit(&x, &y).unwrap();
            prop_assert!((s - a).abs() < 1e-9 && (i - b).abs() < 1e-9);
        }
    }

    #[test]
    fn qc_pipeline_conserves_and_is_idempotent(
        rows in proptest::collection::vec((0usize..12, 0usize..3, 0usize..11, 0u8..=100), 0..300),
        rejected in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let mut log = ResponseLog::default();
        for (w, h, i, d) in &rows {
            log.responses.push(LoggedResponse {
                response: Response {
                    worker_id: format!("w{w:02}"),
                    hit_id: format!("h{h}"),
                    image_ref: format!("h{h}-i{i}"),
                    level: lvl(*d),
                    clicks: [[0, 0], [1, 1], [2, 2]],
                    started_at: t,
                    submitted_at: t,
                    client_ppi: None,
                },
                codec: CodecId::Jpeg,
                gold: *i == 0,
                validation: None,
            });
        }
        for (w, r) in rejected.iter().enumerate() {
            log.worker_states.insert(format!("w{w:02}"), if *r { WorkerState::Rejected } else { WorkerState::Revoked });
        }
        let original = log.clone();
        let params = qc::QcParams::default();
        let report = qc::run_pipeline(&mut log, &params).unwrap();
        let removed: usize = report.stages.iter().map(|s| s.removed).sum();
        prop_assert_eq!(report.input, report.output + removed);
        for r in &log.responses {
            prop_assert!(original.responses.contains(r));
            prop_assert!((5..=95).contains(&r.response.level.get()));
        }
        let once = log.clone();
        let again = qc::run_pipeline(&mut log, &params).unwrap();
        prop_assert_eq!(&once, &log);
        prop_assert!(again.stages.iter().all(|s| s.removed == 0));
    }
}

#[test]
fn gt_centers_recover_planted_gaussians() {
    let planted = [(60.0, 70.0, 1.0), (180.0, 60.0, 0.9), (120.0, 190.0, 0.8)];
    let map = CriticalityMap::from_fn(256, 256, |x, y| {
        planted
            .iter()
            .map(|(px, py, a)| a * (-((x as f64 - px).powi(2) + (y as f64 - py).powi(2)) / (2.0 * 25.0f64.powi(2))).exp())
            .sum()
    })
    .max_normalized();
    let centers = goldgen::select_gt_centers(&map, 35.0).unwrap();
    for (px, py, _) in planted {
        let d = centers
            .iter()
            .map(|c| ((c[0] as f64 - px).powi(2) + (c[1] as f64 - py).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(d <= 17.5, "planted ({px}, {py}) recovered at distance {d}");
    }
}

#[test]
fn raster_png_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cache = imaging::LadderCache::new(dir.path());
    let src = imaging::synthetic_image(16, 16, 1);
    let built = cache
        .get_or_build("img", &src, CodecId::Jpeg, &imaging::JpegAdapter)
        .unwrap();
    assert!(cache.is_fresh("img", &src.content_hash(), CodecId::Jpeg, &built.meta.adapter));
    let loaded = cache.load("img", CodecId::Jpeg).unwrap();
    assert_eq!(loaded.frames(), built.frames());
    let other = RasterImage::filled(16, 16, [1, 2, 3]).unwrap();
    assert!(!cache.is_fresh("img", &other.content_hash(), CodecId::Jpeg, &built.meta.adapter));
}
