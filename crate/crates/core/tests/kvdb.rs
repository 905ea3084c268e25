mod common;

use common::{dense, normal, random_vector, rng, scan_oracle, vector};
use nalgebra::DMatrix;
use proptest::prelude::*;

use neuraldb::kvdb::Scan;
use neuraldb::{DenseMatrix, DenseVector, Error, FactId, FormatError, NeuralKVDatabase};

fn random_db(m: usize, d1: usize, d2: usize, gamma: f64, seed: u64) -> (NeuralKVDatabase, DMatrix<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let keys = normal(d1, m, &mut r);
    let residuals = normal(d2, m, &mut r);
    let db = NeuralKVDatabase::build(&dense(keys.clone()), &dense(residuals.clone()), gamma, 1).unwrap();
    (db, keys, residuals)
}

/// Probes around stored keys (so some hit) mixed with unrelated ones.
fn probes(keys: &DMatrix<f64>, count: usize, seed: u64) -> Vec<DenseVector> {
    let mut r = rng(seed);
    (0..count)
        .map(|j| {
            let noise = normal(keys.nrows(), 1, &mut r);
            if keys.ncols() == 0 || j % 2 == 0 {
                DenseVector::try_from_na(noise.column(0).into_owned()).unwrap()
            } else {
                let k = keys.column(j % keys.ncols());
                let q = k + noise.column(0) * (0.1 * (j % 7) as f64) * (k.norm() / noise.norm());
                DenseVector::try_from_na(q).unwrap()
            }
        })
        .collect()
}

/// Checks a query against the brute-force oracle over `keys`/`residuals`,
/// whose columns are in entry order.
fn agrees_with_oracle(db: &NeuralKVDatabase, keys: &DMatrix<f64>, residuals: &DMatrix<f64>, q: &DenseVector) -> bool {
    let got = db.query(q).unwrap();
    match scan_oracle(keys, q.as_slice()) {
        None => !got.hit && got.index.is_none() && got.residual.as_slice().iter().all(|x| *x == 0.0),
        Some((i, c)) => {
            let hit = c > db.gamma();
            let residual_ok = if hit {
                got.residual.as_slice() == residuals.column(i).as_slice()
            } else {
                got.residual.as_slice().iter().all(|x| x.to_bits() == 0)
            };
            got.hit == hit && got.index == Some(i) && (got.similarity - c).abs() < 1e-12 && residual_ok
        }
    }
}

#[test]
fn empty_database_always_misses() {
    let db = NeuralKVDatabase::build(&DenseMatrix::zeros(3, 0), &DenseMatrix::zeros(2, 0), 0.65, 0).unwrap();
    assert!(db.is_empty());
    let r = db.query(&vector(&[1.0, 0.0, 0.0])).unwrap();
    assert!(!r.hit && r.index.is_none() && r.fact.is_none());
    assert_eq!(r.residual, DenseVector::zeros(2));
}

#[test]
fn single_entry_and_orthogonal_queries() {
    let keys = DenseMatrix::from_rows(&[&[1.0], &[0.0], &[0.0]]).unwrap();
    let res = DenseMatrix::from_rows(&[&[0.25], &[-4.0]]).unwrap();
    let db = NeuralKVDatabase::build(&keys, &res, 0.65, 0).unwrap();
    let r = db.query(&vector(&[1.0, 0.0, 0.0])).unwrap();
    assert!(r.hit);
    assert_eq!(r.fact, Some(FactId(0)));
    assert_eq!(r.similarity, 1.0);
    assert_eq!(r.residual.as_slice(), &[0.25, -4.0]);

    let r = db.query(&vector(&[0.0, 2.0, -1.0])).unwrap();
    assert!(!r.hit && r.fact.is_none());
    assert!(r.residual.as_slice().iter().all(|x| x.to_bits() == 0));
}

#[test]
fn gate_is_strict() {
    let keys = DenseMatrix::from_rows(&[&[1.0], &[0.0]]).unwrap();
    let db = NeuralKVDatabase::build(&keys, &DenseMatrix::from_rows(&[&[1.0]]).unwrap(), 0.5, 0).unwrap();
    // cos = 0.5 exactly: (1, √3) has norm 2
    let at = db.query(&vector(&[1.0, 3f64.sqrt()])).unwrap();
    assert!((at.similarity - 0.5).abs() < 1e-15);
    assert_eq!(at.hit, at.similarity > 0.5);
    let above = db.query(&vector(&[1.0, 1.7])).unwrap();
    assert!(above.hit);
}

#[test]
fn stored_keys_are_recalled_verbatim() {
    let (db, keys, residuals) = random_db(200, 16, 8, 0.65, 1);
    for i in 0..200 {
        let r = db.query(&DenseVector::try_from_na(keys.column(i).into_owned()).unwrap()).unwrap();
        assert!(r.hit);
        assert_eq!(r.index, Some(i));
        assert!((r.similarity - 1.0).abs() < 1e-12);
        assert_eq!(r.residual.as_slice(), residuals.column(i).as_slice());
        let unit: f64 = db.unit_key(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((unit - 1.0).abs() < 1e-9);
    }
}

#[test]
fn duplicate_keys_resolve_to_the_earlier_entry() {
    let mut db = NeuralKVDatabase::new(2, 1, 0.65, 0).unwrap();
    let k = vector(&[0.6, 0.8]);
    let first = db.insert(&k, &vector(&[1.0]), None).unwrap();
    let second = db.insert(&k.scale(3.0), &vector(&[2.0]), None).unwrap();
    assert_ne!(first, second);
    let r = db.query(&k).unwrap();
    assert_eq!(r.fact, Some(first));
    assert_eq!(r.residual.as_slice(), &[1.0]);
}

#[test]
fn random_queries_match_brute_force_scan() {
    let (db, keys, residuals) = random_db(3_000, 32, 8, 0.65, 2);
    for q in probes(&keys, 300, 3) {
        assert!(agrees_with_oracle(&db, &keys, &residuals, &q));
    }
}

#[test]
fn sequential_and_parallel_scans_agree() {
    let (db, keys, _) = random_db(10_000, 16, 4, 0.65, 4);
    for q in probes(&keys, 50, 5) {
        let s = db.best_match(q.as_slice(), Scan::Sequential).unwrap();
        assert_eq!(s, db.best_match(q.as_slice(), Scan::Parallel).unwrap());
        assert_eq!(s, db.best_match(q.as_slice(), Scan::Auto).unwrap());
    }
}

#[test]
fn sequential_inserts_equal_one_build() {
    let (built, keys, residuals) = random_db(10_000, 24, 6, 0.65, 6);
    let mut grown = NeuralKVDatabase::new(24, 6, 0.65, 1).unwrap();
    for i in 0..10_000 {
        let k = DenseVector::try_from_na(keys.column(i).into_owned()).unwrap();
        let r = DenseVector::try_from_na(residuals.column(i).into_owned()).unwrap();
        assert_eq!(grown.insert(&k, &r, None).unwrap(), FactId(i as u64));
    }
    assert_eq!(grown, built);
    for q in probes(&keys, 100, 7) {
        assert_eq!(grown.query(&q).unwrap(), built.query(&q).unwrap());
    }
}

#[test]
fn removal_matches_scan_over_the_rest() {
    let (mut db, keys, residuals) = random_db(5, 6, 3, 0.3, 8);
    assert!(db.remove(FactId(2)));
    assert_eq!(db.ids(), &[FactId(0), FactId(1), FactId(3), FactId(4)]);
    let keep = [0, 1, 3, 4];
    let k = keys.select_columns(keep.iter());
    let r = residuals.select_columns(keep.iter());
    for q in probes(&keys, 50, 9) {
        assert!(agrees_with_oracle(&db, &k, &r, &q));
    }
    let before = db.clone();
    assert!(!db.remove(FactId(2)));
    assert!(!db.remove(FactId(77)));
    assert_eq!(db, before);
}

#[test]
fn removing_the_only_entry_restores_empty_behavior() {
    let mut db = NeuralKVDatabase::new(3, 2, 0.65, 0).unwrap();
    let k = vector(&[1.0, 2.0, 3.0]);
    let id = db.insert(&k, &vector(&[1.0, 1.0]), Some("x".into())).unwrap();
    assert!(db.query(&k).unwrap().hit);
    assert!(db.remove(id));
    assert!(db.is_empty());
    let r = db.query(&k).unwrap();
    assert!(!r.hit && r.index.is_none());
}

#[test]
fn update_replaces_in_place() {
    let (mut db, keys, mut residuals) = random_db(40, 8, 3, 0.65, 10);
    let k5 = DenseVector::try_from_na(keys.column(5).into_owned()).unwrap();
    let fresh = vector(&[9.0, 8.0, 7.0]);
    assert!(db.update(FactId(5), &fresh, None).unwrap());
    assert_eq!(db.query(&k5).unwrap().residual, fresh);
    assert_eq!(db.ids()[5], FactId(5));
    assert!(!db.update(FactId(400), &fresh, None).unwrap());

    // oracle: the same matrices with column 5 replaced
    let mut r = rng(11);
    let new_key = random_vector(8, &mut r);
    assert!(db.update(FactId(5), &fresh, Some(&new_key)).unwrap());
    let mut k = keys.clone();
    k.set_column(5, new_key.as_na());
    residuals.set_column(5, fresh.as_na());
    for q in probes(&k, 50, 12) {
        assert!(agrees_with_oracle(&db, &k, &residuals, &q));
    }
}

#[test]
fn construction_is_validated() {
    assert!(NeuralKVDatabase::new(2, 2, 0.0, 0).is_err());
    assert!(NeuralKVDatabase::new(2, 2, 1.0, 0).is_err());
    assert!(NeuralKVDatabase::new(0, 2, 0.5, 0).is_err());
    let zero_key = DenseMatrix::from_rows(&[&[0.0], &[0.0]]).unwrap();
    assert!(matches!(
        NeuralKVDatabase::build(&zero_key, &DenseMatrix::zeros(1, 1), 0.5, 0),
        Err(Error::ZeroKey)
    ));
    assert!(NeuralKVDatabase::build(&zero_key, &DenseMatrix::zeros(1, 2), 0.5, 0).is_err());
    let mut db = NeuralKVDatabase::new(2, 1, 0.5, 0).unwrap();
    assert!(db.insert(&vector(&[1.0]), &vector(&[1.0]), None).is_err());
    assert!(db.insert(&vector(&[1.0, 0.0]), &vector(&[1.0, 2.0]), None).is_err());
    assert!(db.query(&vector(&[1.0, 0.0, 0.0])).is_err());
    let id = db.insert(&vector(&[1.0, 0.0]), &vector(&[1.0]), None).unwrap();
    assert!(matches!(
        db.insert_with_id(id, &vector(&[0.0, 1.0]), &vector(&[1.0]), None),
        Err(Error::DuplicateId(_))
    ));
}

#[test]
fn memory_tracks_the_formula() {
    let (db, _, _) = random_db(10_000, 128, 64, 0.65, 13);
    assert_eq!(db.len(), 10_000);
    assert_eq!(db.formula_scalars(), (128 + 64) * 10_000);
    let ratio = db.heap_bytes() as f64 / (8.0 * db.formula_scalars() as f64);
    assert!((1.0..2.0).contains(&ratio), "{ratio}");
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (mut db, keys, _) = random_db(300, 12, 5, 0.7, 14);
    db.remove(FactId(10));
    db.insert(&vector(&[1.0; 12]), &vector(&[2.0; 5]), Some("note ✓".into())).unwrap();
    let path = dir.path().join("a.ndb");
    db.save(&path).unwrap();
    let back = NeuralKVDatabase::load(&path).unwrap();
    assert_eq!(back, db);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!(back.meta(db.len() - 1), Some("note ✓"));
    for q in probes(&keys, 100, 15) {
        assert_eq!(back.query(&q).unwrap(), db.query(&q).unwrap());
    }

    let empty = NeuralKVDatabase::new(4, 2, 0.65, 3).unwrap();
    let path = dir.path().join("empty.ndb");
    empty.save(&path).unwrap();
    let back = NeuralKVDatabase::load(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!((back.d1(), back.d2(), back.layer(), back.gamma()), (4, 2, 3, 0.65));
}

#[test]
fn damaged_files_fail_with_distinct_errors() {
    let (db, _, _) = random_db(50, 6, 3, 0.65, 16);
    let bytes = db.to_bytes();
    let mut header = bytes.clone();
    header[3] ^= 0x20;
    assert!(matches!(
        NeuralKVDatabase::from_bytes(&header),
        Err(Error::Format(FormatError::VersionMismatch { .. }))
    ));
    for cut in [0, 7, 20, bytes.len() - 1] {
        assert!(matches!(
            NeuralKVDatabase::from_bytes(&bytes[..cut]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }
    let mut payload = bytes.clone();
    let mid = bytes.len() - 40;
    payload[mid] ^= 0x80;
    assert!(matches!(
        NeuralKVDatabase::from_bytes(&payload),
        Err(Error::Format(FormatError::ChecksumMismatch { .. }))
    ));
    let missing = NeuralKVDatabase::load(std::path::Path::new("/nonexistent/dir/db.ndb"));
    assert!(matches!(missing, Err(Error::Io { .. })));
}

#[test]
fn databases_are_shareable_across_threads() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<NeuralKVDatabase>();
}

fn db_strategy() -> impl Strategy<Value = (usize, usize, usize, u64, bool)> {
    (0usize..40, 2usize..10, 1usize..4, any::<u64>(), any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn query_equals_scan((m, d1, d2, seed, dup) in db_strategy(), gamma in 0.05f64..0.95) {
        let mut r = rng(seed);
        let mut keys = normal(d1, m, &mut r);
        if dup && m >= 2 {
            let c = keys.column(0).into_owned() * 2.0;
            keys.set_column(m - 1, &c);
        }
        let residuals = normal(d2, m, &mut r);
        let db = NeuralKVDatabase::build(&dense(keys.clone()), &dense(residuals.clone()), gamma, 0).unwrap();
        for q in probes(&keys, 20, seed ^ 5) {
            prop_assert!(agrees_with_oracle(&db, &keys, &residuals, &q));
        }
    }

    #[test]
    fn raising_gamma_never_creates_hits((m, d1, d2, seed, _) in db_strategy(), lo in 0.05f64..0.9, step in 0.0f64..0.09) {
        let (mut db, keys, _) = random_db(m, d1, d2, lo, seed);
        let qs = probes(&keys, 20, seed ^ 9);
        let before: Vec<bool> = qs.iter().map(|q| db.query(q).unwrap().hit).collect();
        db.set_gamma(lo + step).unwrap();
        for (q, was) in qs.iter().zip(before) {
            prop_assert!(was || !db.query(q).unwrap().hit);
        }
    }

    #[test]
    fn insert_then_remove_is_identity((m, d1, d2, seed, _) in db_strategy()) {
        let (mut db, keys, _) = random_db(m, d1, d2, 0.5, seed);
        let qs = probes(&keys, 20, seed ^ 11);
        let before: Vec<_> = qs.iter().map(|q| db.query(q).unwrap()).collect();
        let mut r = rng(seed ^ 13);
        let id = db.insert(&random_vector(d1, &mut r), &random_vector(d2, &mut r), None).unwrap();
        prop_assert!(db.remove(id));
        for (q, b) in qs.iter().zip(before) {
            prop_assert_eq!(db.query(q).unwrap(), b);
        }
    }
}
