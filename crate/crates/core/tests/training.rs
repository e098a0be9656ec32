use vsumm::dataset::{synth_corpus, to_train_video, CorpusSpec};
use vsumm::trainer::{train, DecoderKind, ModelSpec, TrainConfig, TrainState, TrainVideo};

fn eight_frame_corpus() -> Vec<TrainVideo> {
    let spec = CorpusSpec {
        videos: 4,
        frame_count: 8,
        height: 16,
        width: 16,
        feature_width: 16,
        ..CorpusSpec::default()
    };
    synth_corpus(&spec)
        .unwrap()
        .iter()
        .map(|r| to_train_video(r, 4).unwrap())
        .collect()
}

#[test]
fn final_epoch_reward_is_not_below_the_first() {
    let data = eight_frame_corpus();
    for seed in 0..5 {
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(ModelSpec::new(16, DecoderKind::Lstm), &config, data.len()).unwrap();
        let report = train(&data, &config, &mut state, None).unwrap();
        assert_eq!(report.epochs.len(), 30);
        let first = report.epochs[0].mean_reward;
        let last = report.epochs[29].mean_reward;
        println!("seed {seed}: epoch 1 {first:.4}, epoch 30 {last:.4}");
        assert!(last >= first, "seed {seed}: reward fell from {first} to {last}");
    }
}
