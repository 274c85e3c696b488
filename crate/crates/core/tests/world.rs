use pivot_refine::seed;
use pivot_refine::world::{oracle_best_prompt, Image, Prompt, World, WorldConfig};
use rand::Rng;
use rand_distr::StandardNormal;

const A0_SEED7: [f64; 16] = [
    -0.14529904579771588,
    -0.2974580452480495,
    -0.1930138086311821,
    0.5183395745631909,
    -0.20197672479524828,
    -0.4507083846698017,
    -0.24182278933263832,
    0.04129164528260884,
    0.2014657266069957,
    0.36408341444340653,
    0.5289776974611452,
    -0.4663395101165071,
    0.030790116400770194,
    -0.09766785599952676,
    -0.44705752561655043,
    0.3215739203878498,
];

const ENCODE_ZERO_SEED7: [f64; 32] = [
    0.06627580710788242,
    -0.03387211788025681,
    -0.07277126313254646,
    0.08921288884072318,
    -0.20974995316535075,
    0.03469877087843038,
    0.14115324192522813,
    -0.05428156923719141,
    0.08882143669233823,
    0.019083072873807668,
    -0.10939208084197649,
    -0.08126505791928419,
    -0.05166604293836852,
    0.06029429526237187,
    -0.13342440459469274,
    -0.08200764852282255,
    -0.030445589118585983,
    0.025766829910543684,
    -0.07856542406093452,
    0.28616567902140305,
    0.0823873599895596,
    0.19440237256337708,
    -0.024844447644418198,
    -0.06169001064881058,
    0.07375417451945701,
    0.051113027205430143,
    -0.12460270587547968,
    -0.045273057985414644,
    -0.11416420555703866,
    -0.04175861787731794,
    -0.07233728051717594,
    0.07136861112638586,
];

const PREF_C0C1_S3_SEED7: f64 = 0.7463512223970015;

/// Row-major standard normals scaled by `scale`, regenerated from the documented stream.
fn regen(tag: &str, index: u64, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(7, tag, index);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect())
        .collect()
}

fn world() -> World {
    World::new(WorldConfig::default()).unwrap()
}

fn p(w: &World, s: &str) -> Prompt {
    w.vocab().parse_prompt(s, w.max_len()).unwrap()
}

#[test]
fn concept_column_matches_seeded_construction() {
    let a = regen("concept-matrix", 0, 16, 8, 0.25);
    let col: Vec<f64> = a.iter().map(|row| row[0]).collect();
    assert_eq!(col, A0_SEED7);
    let w = World::new(WorldConfig { sigma: 0.0, ..WorldConfig::default() }).unwrap();
    let img = w.generate(&p(&w, "c0"), 1, 0).unwrap().remove(0);
    assert_eq!(img.0, A0_SEED7);
}

#[test]
fn encoder_offsets_match_seeded_construction() {
    let offsets: Vec<f64> = regen("image-encoder-offset", 0, 4, 8, 0.1).concat();
    assert_eq!(offsets, ENCODE_ZERO_SEED7);
    let w = world();
    assert_eq!(w.encode_image(&Image(vec![0.0; 16])).unwrap().as_tensor().data(), &ENCODE_ZERO_SEED7[..]);
}

#[test]
fn preference_matches_single_expression() {
    let w = world();
    let a = regen("concept-matrix", 0, 16, 8, 0.25);
    let mut b = regen("style-matrix", 0, 16, 4, 0.25);
    let mut rng = seed::rng(7, "quality-direction", 0);
    let q: Vec<f64> = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let q: Vec<f64> = q.iter().map(|x| x / qn).collect();
    let gains = [0.5, 1.0, 1.5, 2.0];
    for (r, row) in b.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x += gains[j] * q[r];
        }
    }
    let img: Vec<f64> = (0..16).map(|r| a[r][0] + a[r][1] + b[r][3]).collect();
    let proj: Vec<f64> = (0..8).map(|j| (0..16).map(|r| a[r][j] * img[r]).sum()).collect();
    let bag = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let cos = proj.iter().zip(&bag).map(|(x, y)| x * y).sum::<f64>()
        / (proj.iter().map(|x| x * x).sum::<f64>().sqrt() * 2f64.sqrt());
    let expected = cos.clamp(0.0, 1.0) / (1.0 + (-q.iter().zip(&img).map(|(x, y)| x * y).sum::<f64>()).exp());
    assert!((expected - PREF_C0C1_S3_SEED7).abs() < 1e-12);

    let rendered = w.render(&p(&w, "c0 c1 s3")).unwrap();
    assert!((w.preference(&rendered, &p(&w, "c0 c1")) - PREF_C0C1_S3_SEED7).abs() < 1e-12);
}

#[test]
fn single_token_oracle_matches_enumeration() {
    let w = world();
    let u = p(&w, "c0");
    let best = oracle_best_prompt(&w, &u, 1, 1_000_000).unwrap();
    let mut scores = Vec::new();
    for t in 0..w.vocab().n_content() as u32 {
        let mut toks = u.tokens().to_vec();
        toks.push(t);
        let cand = Prompt::new(toks, w.vocab(), 12).unwrap();
        scores.push((w.preference(&w.render(&cand).unwrap(), &u), t));
    }
    let top = scores.iter().fold(scores[0], |a, b| if b.0 > a.0 { *b } else { a });
    assert_eq!(best.prompt.tokens(), &[0, top.1]);
    // The winner is a style token; with the seed-7 matrices it is s2, not the
    // largest-gain style.
    assert_eq!(w.vocab().name(top.1), "s2");
    assert_eq!(best.candidates, 13);
}

#[test]
fn log_sampler_contract() {
    let w = world();
    let log = pivot_refine::world::sample_log(&w, 10, 4, 1.0, 5).unwrap();
    assert_eq!(log.len(), 10);
    for r in &log {
        assert_eq!((r.images.len(), r.scores.len()), (4, 4));
        assert!(r.prompt.has_style(w.vocab()));
    }
    assert_eq!(log, pivot_refine::world::sample_log(&w, 10, 4, 1.0, 5).unwrap());
}

#[test]
fn log_file_round_trip_and_errors() {
    let w = world();
    let log = pivot_refine::world::sample_log(&w, 12, 3, 0.5, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    pivot_refine::world::write_log(&path, &log).unwrap();
    assert_eq!(pivot_refine::world::load_log(&path, &w).unwrap(), log);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() - 20]).unwrap();
    let err = pivot_refine::world::load_log(&path, &w).unwrap_err().to_string();
    assert!(err.contains(":12:"), "{err}");
}
