// throwaway recipe probe (deleted after calibration)
use dcucnet::complex_nn::Mode;
use dcucnet::data::{build_corpus, CorpusSpec, NoiseKind, Split};
use dcucnet::model::{enhance_fwd, EnhanceOptions, ModelConfig, ModelState};
use dcucnet::train_eval::{si_snr, train, SiSnrVariant, TrainConfig};
use std::time::Instant;

fn eval_utt(model: &ModelState, corpus: &dcucnet::data::Corpus, idx: &[usize], zero_visual: bool) -> (f64, f64) {
    let mut enh = 0.0;
    let mut base = 0.0;
    for &i in idx {
        let sc = corpus.scene(i).unwrap();
        let opts = EnhanceOptions { mode: Mode::Train, zero_visual };
        let (est, _, _) = enhance_fwd(&sc.noisy, &sc.video, model, &opts, &mut None).unwrap();
        enh += si_snr(&est, &sc.clean, SiSnrVariant::ScaleInvariant).unwrap();
        base += si_snr(&sc.noisy, &sc.clean, SiSnrVariant::ScaleInvariant).unwrap();
    }
    (enh / idx.len() as f64, base / idx.len() as f64)
}

fn main() {
    let corpus = build_corpus(CorpusSpec { num_scenes: 64, seed: 7, ..Default::default() }).unwrap();
    let mut model = ModelState::init(ModelConfig { seed: 1, ..Default::default() }).unwrap();
    let test = corpus.split_indices(Split::Test);
    let mut compete: Vec<usize> = corpus.split_indices(Split::Val);
    compete.extend(corpus.split_indices(Split::Test));
    compete.retain(|&i| corpus.scene(i).unwrap().noise_kind == NoiseKind::CompetingSpeech);

    let start = Instant::now();
    for round in 0..10 {
        let cfg = TrainConfig {
            epochs: 1,
            crop_frames: Some(13),
            seed: 100 + round,
            ..Default::default()
        };
        let (m2, hist) = train(model, &corpus, &cfg).unwrap();
        model = m2;
        let mean_loss: f64 = hist.steps.iter().map(|s| s.loss).sum::<f64>() / hist.steps.len() as f64;
        let (enh, base) = eval_utt(&model, &corpus, &test, false);
        let (av, _) = eval_utt(&model, &corpus, &compete, false);
        let (ao, _) = eval_utt(&model, &corpus, &compete, true);
        eprintln!(
            "epoch {} ({:.0}s): loss {:.2}, impr {:+.2} dB, margin {:+.2} dB",
            round + 1, start.elapsed().as_secs_f64(), mean_loss, enh - base, av - ao
        );
    }
}
