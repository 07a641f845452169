use std::time::Instant;

use facestyle_core::numkit::{rng, Tensor};
use facestyle_core::posegpt::{CodeSample, GptTrainConfig, PoseGpt, PoseGptConfig, Style};
use rand::Rng;

#[test]
fn overfits_four_sequences() {
    let mut r = rng(21);
    let corpus: Vec<CodeSample<f32>> = (0..4)
        .map(|i| CodeSample {
            speech: Tensor::randn(&[100, 18], 1.0, &mut r),
            codes: (0..25).map(|_| r.random_range(0..64)).collect(),
            style: i,
        })
        .collect();
    let mut m = PoseGpt::<f32>::new(PoseGptConfig { n_styles: 4, ..Default::default() }, 3).unwrap();
    let t0 = Instant::now();
    m.train(&corpus, &GptTrainConfig::default(), 5).unwrap();
    let mut loss = 0.0;
    let (mut hit, mut total) = (0, 0);
    for s in &corpus {
        let cond = m.condition(&s.speech, &Style::Id(s.style)).unwrap();
        loss += m.tf_loss(&s.codes, &cond).unwrap() / 4.0;
        let dec = m.greedy_decode(&cond, s.codes.len()).unwrap();
        hit += dec.iter().zip(&s.codes).filter(|(a, b)| a == b).count();
        total += s.codes.len();
    }
    let acc = hit as f64 / total as f64;
    eprintln!("tf loss {loss:.4}, greedy match {acc:.3}, {:?}", t0.elapsed());
    assert!(loss < 0.1);
    assert!(acc >= 0.95);
}
