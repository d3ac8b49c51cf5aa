use proptest::prelude::*;
use sobolev_core::geometry::{build_index, GeometryError, Neighbor, PointCloud};

/// All-pairs distance scan with index tie-break.
fn brute_knn(cloud: &PointCloud<f64>, q: usize, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = (0..cloud.len())
        .map(|i| {
            let d2: f64 = cloud.point(i).iter().zip(cloud.point(q)).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d2, i)| (i, d2.sqrt())).collect()
}

fn pairs(v: &[Neighbor<f64>]) -> Vec<(usize, f64)> {
    v.iter().map(|n| (n.index, n.distance)).collect()
}

fn cloud_strategy() -> impl Strategy<Value = PointCloud<f64>> {
    (1usize..=3, 1usize..200).prop_flat_map(|(dim, n)| {
        // coarse lattice coordinates force many distance ties
        proptest::collection::vec(0i32..12, dim * n).prop_map(move |raw| {
            let mut coords = Vec::new();
            let mut seen = std::collections::BTreeSet::new();
            for p in raw.chunks(dim) {
                if seen.insert(p.to_vec()) {
                    coords.extend(p.iter().map(|&c| c as f64 / 4.0));
                }
            }
            let m = coords.len() / dim;
            PointCloud::from_flat(dim, coords, vec![0.0; m]).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_equals_brute_force(cloud in cloud_strategy(), kfrac in 0.0f64..1.0, qfrac in 0.0f64..1.0) {
        let idx = build_index(&cloud).unwrap();
        let n = cloud.len();
        let k = 1 + ((n - 1) as f64 * kfrac) as usize;
        let q = ((n - 1) as f64 * qfrac) as usize;
        let got = idx.knn(q, k).unwrap();
        prop_assert_eq!(pairs(&got), brute_knn(&cloud, q, k));
        prop_assert_eq!(got[0].index, q);
        prop_assert!(got.windows(2).all(|w| w[0].distance <= w[1].distance));
        prop_assert_eq!(idx.knn(q, k).unwrap(), got);
    }

    #[test]
    fn csv_round_trip(raw in proptest::collection::vec(-1e6f64..1e6, 3..60)) {
        let n = raw.len() / 3;
        let coords: Vec<f64> = raw[..2 * n].to_vec();
        let values: Vec<f64> = raw[2 * n..3 * n].to_vec();
        let Ok(cloud) = PointCloud::from_flat(2, coords, values) else { return Ok(()) };
        let mut buf = Vec::new();
        cloud.write_csv(&mut buf).unwrap();
        let back = PointCloud::<f64>::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, cloud);
    }
}

#[test]
fn line_examples() {
    let c = PointCloud::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.0; 3]).unwrap();
    let idx = build_index(&c).unwrap();
    assert_eq!(idx.len(), 3);
    assert_eq!(pairs(&idx.knn(1, 2).unwrap()), vec![(1, 0.0), (0, 1.0)]);
    assert_eq!(pairs(&idx.knn(0, 1).unwrap()), vec![(0, 0.0)]);
    assert_eq!(idx.knn(0, 4).unwrap_err(), GeometryError::KTooLarge { k: 4, size: 3 });
}

#[test]
fn duplicates_rejected_at_load() {
    let csv = "x1,x2,u\n0.5,0.25,1\n0.1,0.2,2\n0.5,0.25,3\n";
    assert_eq!(
        PointCloud::<f64>::read_csv(csv.as_bytes()).unwrap_err(),
        GeometryError::DuplicatePoints { first: 0, second: 2 }
    );
}
