use pivot_refine::models::{decoder_all_logits, DecoderParams, EncoderParams, ModelConfig, ModelDims, PivotRep};
use pivot_refine::tensor::Tensor;
use pivot_refine::train::{decoder_grad_check, encoder_grad_check, fit_decoder, fit_encoder, lm_loss, mse_loss};
use pivot_refine::world::{Prompt, World, WorldConfig};

fn dims() -> ModelDims {
    ModelDims::from_world(&WorldConfig::default())
}

fn world() -> World {
    World::new(WorldConfig::default()).unwrap()
}

fn prompt(w: &World, text: &str) -> Prompt {
    w.vocab().parse_prompt(text, w.max_len()).unwrap()
}

fn pivot_of(w: &World, text: &str) -> PivotRep {
    w.encode_image(&w.render(&prompt(w, text)).unwrap()).unwrap()
}

#[test]
fn mse_matches_plain_loop() {
    let a = PivotRep::new(Tensor::from_vec(4, 8, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()));
    let b = PivotRep::new(Tensor::from_vec(4, 8, (0..32).map(|i| (i as f64 * 0.11).cos()).collect()));
    let mut sum = 0.0;
    for i in 0..32 {
        let d = a.as_tensor().data()[i] - b.as_tensor().data()[i];
        sum += d * d;
    }
    assert!((mse_loss(&a, &b).unwrap() - sum / 32.0).abs() < 1e-15);
    assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
    assert!(mse_loss(&a, &PivotRep::zeros(3, 8)).is_err());
}

#[test]
fn lm_loss_matches_log_softmax() {
    let w = world();
    let dec = DecoderParams::init(&ModelConfig::default(), dims(), 5).unwrap();
    let p = prompt(&w, "c2 c5 s1");
    let pivot = pivot_of(&w, "c2 c5 s1");
    let rows = decoder_all_logits(&dec, &pivot, p.tokens()).unwrap();
    let mut targets: Vec<u32> = p.tokens().to_vec();
    targets.push(w.vocab().eos());
    assert_eq!(rows.len(), targets.len());
    let mut nll = 0.0;
    for (row, &t) in rows.iter().zip(&targets) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        nll += lse - row[t as usize];
    }
    let expected = nll / targets.len() as f64;
    assert!((lm_loss(&dec, &pivot, &p).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn uniform_head_costs_log_vocab() {
    let w = world();
    let mut dec = DecoderParams::init(&ModelConfig::default(), dims(), 5).unwrap();
    dec.zero_output_head();
    let loss = lm_loss(&dec, &pivot_of(&w, "c0"), &prompt(&w, "c0 c1 s2")).unwrap();
    assert!((loss - 15f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_epochs_leave_params_alone() {
    let w = world();
    let enc = EncoderParams::init(&ModelConfig::default(), dims(), 2).unwrap();
    let data = vec![(prompt(&w, "c1"), pivot_of(&w, "c1 s0"))];
    let out = fit_encoder(enc.clone(), &data, 0, 0.1, 4, 9).unwrap();
    assert_eq!(out.params, enc);
    assert_eq!(out.curve.len(), 1);

    let dec = DecoderParams::init(&ModelConfig::default(), dims(), 2).unwrap();
    let data = vec![(pivot_of(&w, "c1 s0"), prompt(&w, "c1 s0"))];
    let out = fit_decoder(dec.clone(), &data, 0, 0.1, 4, 9).unwrap();
    assert_eq!(out.params, dec);
}

#[test]
fn encoder_fits_constant_target() {
    let w = world();
    let target = pivot_of(&w, "c3 s2");
    let data: Vec<_> = ["c0", "c1 c4", "c3", "c2 c6 c7", "c5"].iter().map(|t| (prompt(&w, t), target.clone())).collect();
    let enc = EncoderParams::init(&ModelConfig::default(), dims(), 4).unwrap();
    let out = fit_encoder(enc, &data, 300, 0.1, 5, 1).unwrap();
    let last = *out.curve.last().unwrap();
    assert!(last < 1e-3, "final loss {last}");
}

#[test]
fn decoder_memorises_single_example() {
    let w = world();
    let data = vec![(pivot_of(&w, "c4 c6 s3"), prompt(&w, "c4 c6 s3"))];
    let dec = DecoderParams::init(&ModelConfig::default(), dims(), 4).unwrap();
    let out = fit_decoder(dec, &data, 200, 0.1, 1, 1).unwrap();
    let last = *out.curve.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
}

#[test]
fn gradients_match_finite_differences() {
    let w = world();
    let enc = EncoderParams::init(&ModelConfig::default(), dims(), 11).unwrap();
    let batch: Vec<_> = ["c0 c1", "c2", "c5 c3 c7"].iter().map(|t| (prompt(&w, t), pivot_of(&w, &format!("{t} s1")))).collect();
    let g = encoder_grad_check(&enc, &batch, 200, 3).unwrap();
    assert_eq!(g.coords, 200);
    assert!(g.max_rel_error < 1e-4, "encoder {}", g.max_rel_error);

    let dec = DecoderParams::init(&ModelConfig::default(), dims(), 11).unwrap();
    let batch: Vec<_> = ["c0 s1", "c2 c6 s3", "c7 s0"].iter().map(|t| (pivot_of(&w, t), prompt(&w, t))).collect();
    let g = decoder_grad_check(&dec, &batch, 200, 3).unwrap();
    assert!(g.max_rel_error < 1e-4, "decoder {}", g.max_rel_error);
}

#[test]
fn training_is_bit_reproducible() {
    let w = world();
    let data: Vec<_> = ["c0 s1", "c2 c6 s3", "c7 s0", "c1 c3 s2"].iter().map(|t| (pivot_of(&w, t), prompt(&w, t))).collect();
    let run = || fit_decoder(DecoderParams::init(&ModelConfig::default(), dims(), 8).unwrap(), &data, 3, 0.05, 2, 6).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.params, b.params);
}
