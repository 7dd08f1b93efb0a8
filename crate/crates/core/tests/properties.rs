use proptest::prelude::*;

use voladapter_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use voladapter_core::config::RunConfig;
use voladapter_core::grid::{connected_components, Grid3};
use voladapter_core::infer::{stitch, window_origins};
use voladapter_core::metrics::{dice, edt_sq, nsd};
use voladapter_core::params::{Origin, ParamStore};
use voladapter_core::regions::region_partition;
use voladapter_core::volume::{read_volume, write_volume, VolumeSample};
use voladapter_core::{Error, Tensor};

fn dims_strategy(max: usize) -> impl Strategy<Value = [usize; 3]> {
    [1..=max, 1..=max, 1..=max]
}

fn mask_strategy(max: usize) -> impl Strategy<Value = Grid3<u8>> {
    dims_strategy(max).prop_flat_map(|d| {
        let n = d.iter().product::<usize>();
        proptest::collection::vec(prop_oneof![3 => Just(0u8), 1 => Just(1u8)], n).prop_map(move |v| Grid3::new(d, v).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (Grid3<u8>, Grid3<u8>)> {
    dims_strategy(max).prop_flat_map(|d| {
        let n = d.iter().product::<usize>();
        let m = move || proptest::collection::vec(0u8..2, n).prop_map(move |v| Grid3::new(d, v).unwrap());
        (m(), m())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn volume_roundtrip(d in dims_strategy(6), seed in any::<u32>(), sp in [0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0]) {
        let n = d.iter().product::<usize>();
        let img: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(seed | 1) % 1000) as f32 * 0.37 - 100.0).collect();
        let msk: Vec<u8> = (0..n).map(|i| ((i as u32 ^ seed) % 2) as u8).collect();
        let v = VolumeSample::new(Grid3::new(d, img).unwrap(), Grid3::new(d, msk).unwrap(), sp, "v").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        prop_assert_eq!(back.image, v.image);
        prop_assert_eq!(back.mask, v.mask);
        prop_assert_eq!(back.spacing, v.spacing);
    }

    #[test]
    fn checkpoint_roundtrip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 1..4), 1..6), frozen in any::<u8>()) {
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), (0..n).map(|k| (k as f32 - 3.5) * (i as f32 + 0.25)).collect()).unwrap();
            store.insert(format!("t{i}"), t, if i % 2 == 0 { Origin::Pretrained } else { Origin::New }, frozen >> (i % 8) & 1 == 1);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        save_checkpoint(&store, &serde_json::json!({"k": 1}), &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        prop_assert_eq!(back.params.hashes(), store.hashes());
        for (n, prm) in store.iter() {
            let b = back.params.get(n).unwrap();
            prop_assert_eq!(b.frozen, prm.frozen);
            prop_assert_eq!(b.origin, prm.origin);
        }
    }

    #[test]
    fn truncated_blob_is_an_error(cut in 1usize..16) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Origin::New, false);
        let (manifest, blob) = encode(&store, &serde_json::json!({})).unwrap();
        let r = decode(&manifest, &blob[..blob.len().saturating_sub(cut)]);
        prop_assert!(matches!(r, Err(Error::Integrity(_)) | Err(Error::Format(_))));
    }

    #[test]
    fn metrics_symmetric_and_bounded((a, b) in mask_pair(7), sz in 0.5f64..3.0) {
        let sp = [sz, 1.0, 0.75];
        let d1 = dice(&a, &b).unwrap();
        prop_assert_eq!(d1, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d1));
        let n1 = nsd(&a, &b, 2.0, sp).unwrap();
        prop_assert_eq!(n1, nsd(&b, &a, 2.0, sp).unwrap());
        prop_assert!((0.0..=1.0).contains(&n1));
    }

    #[test]
    fn self_similarity_is_one(a in mask_strategy(7)) {
        prop_assume!(a.count_nonzero() > 0);
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(nsd(&a, &a, 5.0, [1.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn removing_true_positive_never_raises_dice((pred, truth) in mask_pair(6), pick in any::<usize>()) {
        let tp: Vec<usize> = (0..pred.len()).filter(|&i| pred.data()[i] == 1 && truth.data()[i] == 1).collect();
        prop_assume!(!tp.is_empty());
        let mut fewer = pred.clone();
        fewer.data_mut()[tp[pick % tp.len()]] = 0;
        prop_assert!(dice(&fewer, &truth).unwrap() <= dice(&pred, &truth).unwrap());
    }

    #[test]
    fn edt_matches_brute_force(f in mask_strategy(6), sp in [0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0]) {
        let d = edt_sq(&f, sp);
        let feats: Vec<[usize; 3]> = (0..f.len()).filter(|&i| f.data()[i] != 0).map(|i| f.coords(i)).collect();
        for i in 0..d.len() {
            let c = d.coords(i);
            let best = feats
                .iter()
                .map(|e| (0..3).map(|a| ((c[a] as f64 - e[a] as f64) * sp[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if best.is_infinite() {
                prop_assert!(d.data()[i].is_infinite());
            } else {
                prop_assert!((d.data()[i] - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn windows_cover_every_voxel(extra in [0usize..30, 0usize..30, 0usize..30], patch in [1usize..12, 1usize..12, 1usize..12], overlap in 0.0f64..0.95) {
        let dims = [patch[0] + extra[0], patch[1] + extra[1], patch[2] + extra[2]];
        let origins = window_origins(dims, patch, overlap);
        let mut cover = Grid3::filled(dims, 0u32);
        for o in &origins {
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    for x in 0..patch[2] {
                        let i = cover.index(o[0] + z, o[1] + y, o[2] + x);
                        cover.data_mut()[i] += 1;
                    }
                }
            }
        }
        prop_assert!(cover.data().iter().all(|&c| c >= 1));
    }

    #[test]
    fn stitching_ignores_window_order(extra in [0usize..6, 0usize..6, 0usize..6], seed in any::<u64>()) {
        let patch = [4, 4, 4];
        let dims = [4 + extra[0], 4 + extra[1], 4 + extra[2]];
        let mut windows: Vec<([usize; 3], Grid3<f32>)> = window_origins(dims, patch, 0.7)
            .into_iter()
            .enumerate()
            .map(|(k, o)| {
                let vals = (0..64).map(|i| ((seed.wrapping_add((k * 64 + i) as u64).wrapping_mul(2654435761) % 2001) as f32 - 1000.0) * 1e-3).collect();
                (o, Grid3::new(patch, vals).unwrap())
            })
            .collect();
        let forward = stitch(dims, &windows).unwrap();
        windows.reverse();
        let n = windows.len();
        windows.rotate_left((seed as usize) % n);
        prop_assert_eq!(stitch(dims, &windows).unwrap(), forward);
    }

    #[test]
    fn regions_cover_largest_component(m in mask_strategy(8)) {
        prop_assume!(m.count_nonzero() > 0);
        let part = region_partition(&m, [1.0; 3], 1.0 / 3.0, 2.0 / 3.0).unwrap();
        let (_, sizes) = connected_components(&m);
        let largest = *sizes.iter().max().unwrap();
        prop_assert_eq!(part.count_nonzero(), largest);
        for i in 0..m.len() {
            prop_assert!(part.data()[i] == 0 || m.data()[i] == 1);
        }
    }

    #[test]
    fn config_roundtrip(lr in 1e-6f64..1.0, epochs in 1usize..500, overlap in 0.0f64..0.99, mla in any::<bool>()) {
        let mut c = RunConfig::default();
        c.train.lr = lr;
        c.train.epochs = epochs;
        c.eval.overlap = overlap;
        c.decoder.use_mla = mla;
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back.fingerprint(), c.fingerprint());
        prop_assert_eq!(back, c);
    }
}

#[test]
fn empty_config_is_default() {
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
}

#[test]
fn unknown_key_rejected() {
    let e = RunConfig::from_json(r#"{"train":{"lrr":1}}"#).unwrap_err();
    assert!(matches!(e, Error::Config { .. }));
}
