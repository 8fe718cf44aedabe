#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use qaconv_core::io::{self, FeatureFile};
use qaconv_core::{FeatureMap, MetaRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FPS: f64 = 25.0;

pub fn qaconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qaconv")).args(args).output().expect("failed to spawn qaconv")
}

pub fn qaconv_ok(args: &[&str]) -> String {
    let out = qaconv(args);
    assert!(out.status.success(), "qaconv {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn random_maps(n: usize, (d, h, w): (usize, usize, usize), seed: u64) -> Vec<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FeatureMap::new(d, h, w, (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

/// Map whose every location holds `v`.
pub fn constant_map(v: &[f32], h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_locations(h, w, &vec![v.to_vec(); h * w]).unwrap()
}

pub fn write_maps(path: &Path, maps: &[FeatureMap]) {
    let (d, h, w) = maps[0].profile();
    io::write_features(path, &FeatureFile { d, h, w, maps: maps.to_vec() }).unwrap();
}

/// Record at `seconds`, stored as a whole frame number at 25 fps.
pub fn timed(identity: i64, camera: i64, seconds: f64) -> MetaRecord {
    MetaRecord::new(identity, camera).with_frame((seconds * FPS).round() as i64, FPS).unwrap()
}

pub const COMPANION_DIM: usize = 8;

fn axis(k: usize) -> Vec<f32> {
    let mut v = vec![0.0; COMPANION_DIM];
    v[k] = 1.0;
    v
}

fn blend(a: usize, b: usize, cos: f32) -> Vec<f32> {
    let mut v = vec![0.0; COMPANION_DIM];
    v[a] = cos;
    v[b] = (1.0 - cos * cos).sqrt();
    v
}

/// Temporal lifting scenario: queries A, B, C walk together past camera 1
/// around t = 1000 s; their true matches A', B', C' appear together in
/// camera 2 around t = 2000 s. A stranger E, seen alone at t = 3000 s, looks
/// more like A than A' does. Twenty far-apart distractors with low
/// appearance scores fill camera 2.
pub struct Companions {
    pub queries: Vec<FeatureMap>,
    pub gallery: Vec<FeatureMap>,
    pub query_meta: Vec<MetaRecord>,
    pub gallery_meta: Vec<MetaRecord>,
}

pub const COMPANION_TRUE_MATCH: usize = 0;
pub const COMPANION_HARD_NEGATIVE: usize = 3;

pub fn companions() -> Companions {
    let (h, w) = (2, 2);
    let queries = vec![constant_map(&axis(0), h, w), constant_map(&axis(3), h, w), constant_map(&axis(5), h, w)];
    let query_meta = vec![timed(1, 1, 1000.0), timed(2, 1, 1010.0), timed(3, 1, 990.0)];

    let mut gallery = vec![
        constant_map(&blend(0, 1, 0.5), h, w),
        constant_map(&blend(3, 4, 0.9), h, w),
        constant_map(&blend(5, 6, 0.9), h, w),
        constant_map(&blend(0, 2, 0.7), h, w),
    ];
    let mut gallery_meta = vec![timed(1, 2, 2000.0), timed(2, 2, 2010.0), timed(3, 2, 1990.0), timed(4, 2, 3000.0)];
    let s = -1.0 / 3f32.sqrt();
    for k in 0..20 {
        let mut v = vec![0.0; COMPANION_DIM];
        v[0] = s;
        v[3] = s;
        v[5] = s;
        gallery.push(constant_map(&v, h, w));
        gallery_meta.push(timed(100 + k as i64, 2, 10_000.0 + 1000.0 * k as f64));
    }
    Companions { queries, gallery, query_meta, gallery_meta }
}

/// Writes query.qfmp, gallery.qfmp, query.meta and gallery.meta into `dir`.
pub fn write_fixture(dir: &Path, queries: &[FeatureMap], gallery: &[FeatureMap], qmeta: &[MetaRecord], gmeta: &[MetaRecord]) {
    write_maps(&dir.join("query.qfmp"), queries);
    write_maps(&dir.join("gallery.qfmp"), gallery);
    io::write_meta(dir.join("query.meta"), qmeta).unwrap();
    io::write_meta(dir.join("gallery.meta"), gmeta).unwrap();
}

/// Each identity owns one channel; queries sit in camera 0, gallery in
/// camera 1, so same-identity pairs score highest.
pub fn perfect(ids: usize, per_id: usize) -> (Vec<FeatureMap>, Vec<FeatureMap>, Vec<MetaRecord>, Vec<MetaRecord>) {
    let d = ids;
    let one_hot = |k: usize| {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        constant_map(&v, 3, 2)
    };
    let queries = (0..ids).map(one_hot).collect();
    let qmeta = (0..ids).map(|k| MetaRecord::new(k as i64, 0)).collect();
    let gallery = (0..ids * per_id).map(|j| one_hot(j % ids)).collect();
    let gmeta = (0..ids * per_id).map(|j| MetaRecord::new((j % ids) as i64, 1)).collect();
    (queries, gallery, qmeta, gmeta)
}

/// Report lines parsed into `(key, value)` pairs.
pub fn parse_report(text: &str) -> Vec<(String, f64)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| Some((k.to_string(), v.parse().ok()?)))
        .collect()
}

pub fn report_value(text: &str, key: &str) -> f64 {
    parse_report(text).into_iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no {key} in {text}")).1
}
