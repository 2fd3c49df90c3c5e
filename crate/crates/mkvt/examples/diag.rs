use mkvt::data::{generate_synthetic, Split, SynthConfig};
use mkvt::model::{batch_step, sgd_step, similarity, MatchModel, ModelConfig, ParamTensors, TrainConfig};
use mkvt::numerics::Rng;

fn main() {
    let dir = std::env::temp_dir().join("mkvt-diag4");
    std::fs::create_dir_all(&dir).unwrap();
    let mut ds = generate_synthetic(
        &SynthConfig { n_pairs: 120, n_classes: 10, image_size: 32, seed: 42, caption_len: 16, vocab_cap: 1024 },
        &dir,
    ).unwrap();
    ds.assign_splits(42, (0.70, 0.15, 0.15)).unwrap();
    let config = ModelConfig { vocab_size: ds.vocab.size(), ..ModelConfig::default() };
    let mut model = MatchModel::init(config, 42).unwrap();
    let cfg = TrainConfig::default();
    let train_idx = ds.split_indices(Split::Train);
    let mut rng = Rng::new(cfg.seed);

    for epoch in 0..60 {
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            let (loss, n) = batch_step(&model, &ds, batch, &mut rng, 1, &mut grads).unwrap();
            sgd_step(&mut model, &grads, cfg.learning_rate).unwrap();
            loss_sum += loss * n as f64;
            count += n;
        }
        if epoch % 5 == 0 || epoch == 59 {
            // diagnostics: head norm, pos/neg sims on the first 30 train pairs
            let wnorm: f64 = model.image_enc.out_proj.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let tnorm: f64 = model.text_enc.out_proj.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let imgs: Vec<Vec<f64>> = (0..30).map(|i| {
                mkvt::model::encode_image(&model.image_enc, &config, &ds.images[i].pixels).unwrap()
            }).collect();
            let txts: Vec<Vec<f64>> = (0..30).map(|i| {
                mkvt::model::encode_text(&model.text_enc, &config, &ds.texts[i].token_ids).unwrap()
            }).collect();
            let mut pos = 0.0;
            let mut neg = 0.0;
            let mut npos = 0;
            let mut nneg = 0;
            for i in 0..30 {
                for j in 0..30 {
                    let s = similarity(&imgs[i], &txts[j]).unwrap();
                    if i % 10 == j % 10 { pos += s; npos += 1; } else { neg += s; nneg += 1; }
                }
            }
            let unorm: f64 = imgs[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            println!(
                "epoch {epoch:>3}  loss {:.4}  w_img {wnorm:.4} w_txt {tnorm:.4} |u| {unorm:.4}  same-class sim {:.4}  cross {:.4}",
                loss_sum / count as f64, pos / npos as f64, neg / nneg as f64
            );
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}
