use tvlt::audio::SpectrogramConfig;
use tvlt::model::ModelConfig;
use tvlt::trainer::{bench_latency, default_cases, BenchCase};

#[test]
fn stage_times_scale_with_input_length() {
    let mut cases = vec![BenchCase {
        audio_seconds: 5.0,
        frames: 2,
    }];
    cases.extend(default_cases());
    let r = bench_latency(&ModelConfig::desk(), &SpectrogramConfig::resampled_16k(), &cases, 20, 0).unwrap();
    assert_eq!(r.runs, 20);
    let [short, ten, twenty] = [&r.cases[0], &r.cases[1], &r.cases[2]];
    assert_eq!((ten.case.audio_seconds, ten.case.frames), (10.0, 4));
    assert_eq!((twenty.case.audio_seconds, twenty.case.frames), (20.0, 8));
    assert_eq!(ten.vision_tokens, 4 * 4);
    assert_eq!(twenty.vision_tokens, 8 * 4);
    // 1 + n/512 frames per 16×16 patch column, 8 bands
    assert_eq!(twenty.audio_tokens, (1 + 20 * 16384 / 512usize).div_ceil(16) * 8);

    let ratio = twenty.stages.fft.median_ms / ten.stages.fft.median_ms;
    assert!((1.5..=3.0).contains(&ratio), "fft 20 s / 10 s = {ratio}");

    let tokens: Vec<usize> = r.cases.iter().map(|c| c.vision_tokens + c.audio_tokens).collect();
    assert!(tokens.windows(2).all(|w| w[0] < w[1]), "{tokens:?}");
    let enc: Vec<f64> = [short, ten, twenty].iter().map(|c| c.stages.encode.median_ms).collect();
    assert!(enc.windows(2).all(|w| w[0] < w[1]), "encode medians {enc:?}");
    for c in &r.cases {
        for s in [c.stages.fft, c.stages.tokenize, c.stages.encode] {
            assert!(s.median_ms > 0.0 && s.mad_ms >= 0.0 && s.mad_ms.is_finite());
        }
    }
}

#[test]
fn zero_runs_is_a_config_error() {
    let err = bench_latency(&ModelConfig::desk(), &SpectrogramConfig::resampled_16k(), &default_cases(), 0, 0).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
