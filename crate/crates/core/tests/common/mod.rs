#![allow(dead_code)]

use ptd_core::autodiff::{Tape, Var};
use ptd_core::config::{ModelConfig, SwitchMode};
use ptd_core::scene::Scene;
use ptd_core::synth::{generate_scene, GenConfig};

pub fn small_config(mode: SwitchMode) -> ModelConfig {
    ModelConfig {
        obs_steps: 6,
        horizon: 6,
        hidden_dim: 8,
        att_dim: 8,
        mlp_hidden: 8,
        switch_mode: mode,
        ..ModelConfig::default()
    }
}

pub fn short_gen(num_scenes: usize) -> GenConfig {
    GenConfig {
        num_scenes,
        steps: 12,
        episode_start_min: 2,
        episode_start_max: 4,
        approach_steps_min: 2,
        approach_steps_max: 3,
        carry_steps_min: 3,
        carry_steps_max: 4,
        ..GenConfig::default()
    }
}

/// First generated scene (short steps) that contains an interaction.
pub fn interaction_scene() -> Scene {
    let cfg = short_gen(64);
    (0..cfg.num_scenes)
        .map(|i| generate_scene(&cfg, i).unwrap())
        .find(|s| s.has_interaction())
        .expect("an interaction scene")
}

pub fn translate(scene: &Scene, v: [f64; 3]) -> Scene {
    let mut s = scene.clone();
    for e in &mut s.entities {
        for f in &mut e.features {
            for (k, x) in f.iter_mut().enumerate() {
                *x += v[k % 3];
            }
        }
    }
    s
}

pub fn values(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| tape.value(v).to_vec()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use std::collections::BTreeMap;

use ptd_core::autodiff::ParamStore;
use ptd_core::geometry::{ego_inverse, ego_transform, EntityClass, EntityFeatures, TapeGeometry};
use ptd_core::model::{model_step, ModelState, PtdModel};
use ptd_core::nn::{Activation, AttnParams};
use ptd_core::scene::Layout;
use ptd_core::switch::{switch_decide, SwitchEvent, SwitchState, THRESHOLD};
use ptd_core::transient::{entity_centroids, spawn_session, transient_step, EgoView};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_entity<R: Rng>(rng: &mut R, class: EntityClass) -> EntityFeatures {
    let points = (0..class.num_points())
        .map(|_| [rng.gen_range(0.0..5000.0), rng.gen_range(0.0..5000.0), rng.gen_range(0.0..2000.0)])
        .collect();
    EntityFeatures::new(class, class.as_str(), points).unwrap()
}

/// Largest absolute coordinate error of `ego_inverse(ego_transform(x))`
/// over `n` random entities, each against its own random human center.
pub fn ego_round_trip_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let class = if rng.gen_bool(0.5) { EntityClass::Human } else { EntityClass::Object };
        let x = random_entity(&mut rng, class);
        let c = random_entity(&mut rng, EntityClass::Human);
        let back = ego_inverse(&ego_transform(&x, &c).unwrap(), &c).unwrap();
        worst = worst.max(max_abs_diff(&back.flat(), &x.flat()));
    }
    worst
}

/// Runs a transient session around the first human of `scene` for every
/// step, feeding a fixed persistent message, and returns the global
/// predictions per step.
pub fn transient_predictions(model: &PtdModel, scene: &Scene) -> Vec<BTreeMap<usize, Vec<f64>>> {
    let cfg = &model.config;
    let layout = Layout::from_scene(scene);
    let r = layout.humans()[0];
    let mut tape = Tape::new();
    let geo = TapeGeometry::new(&mut tape).unwrap();
    let m_pt: Vec<f64> = (0..cfg.hidden_dim).map(|k| (k as f64 * 0.37).sin() * 0.5).collect();
    let mut sessions = BTreeMap::new();
    let mut previous: Option<Vec<Var>> = None;
    let mut out = Vec::new();
    for t in 0..scene.num_steps() {
        let features: Vec<Var> = layout
            .features_at(scene, t)
            .into_iter()
            .map(|f| tape.input(f).unwrap())
            .collect();
        let displacement: Vec<Var> = match &previous {
            Some(p) => features.iter().zip(p).map(|(&a, &b)| tape.sub(a, b).unwrap()).collect(),
            None => layout.classes.iter().map(|c| tape.zeros(c.feature_dim())).collect(),
        };
        let centroids = entity_centroids(&mut tape, &geo, &layout, &features).unwrap();
        let view = EgoView::new(&mut tape, &geo, cfg, &layout, &features, &displacement, &centroids, r).unwrap();
        if t == 0 {
            spawn_session(&mut tape, &mut sessions, cfg, &layout, &view, t).unwrap();
        }
        let from_persistent = tape.input(&m_pt).unwrap();
        let sess = sessions.get_mut(&r).unwrap();
        let step = transient_step(
            &mut tape,
            &model.store,
            &model.params.transient,
            cfg,
            &geo,
            &layout,
            sess,
            &view,
            from_persistent,
        )
        .unwrap();
        out.push(step.predictions.iter().map(|(&i, &v)| (i, tape.value(v).to_vec())).collect());
        previous = Some(features);
    }
    out
}

/// Largest deviation from `pred(x + v) = pred(x) + v` of the transient
/// channel.
pub fn translation_equivariance_error(model: &PtdModel, scene: &Scene, v: [f64; 3]) -> f64 {
    let a = transient_predictions(model, scene);
    let b = transient_predictions(model, &translate(scene, v));
    let mut worst = 0.0f64;
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(pa.keys().collect::<Vec<_>>(), pb.keys().collect::<Vec<_>>(), "outward sets differ");
        for (i, xa) in pa {
            let shifted: Vec<f64> = xa.iter().enumerate().map(|(k, x)| x + v[k % 3]).collect();
            worst = worst.max(max_abs_diff(&shifted, &pb[i]));
        }
    }
    worst
}

pub struct AttentionCheck {
    /// max |sum of weights - 1|
    pub normalization: f64,
    /// max difference of message and matched weights under a value permutation
    pub permutation: f64,
}

/// Random attention calls with random widths, parameters and value sets.
pub fn attention_check(calls: usize, seed: u64) -> AttentionCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = AttentionCheck {
        normalization: 0.0,
        permutation: 0.0,
    };
    for call in 0..calls {
        let (qd, vd, ad) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..12));
        let sigma = if call % 2 == 0 { Activation::Tanh } else { Activation::Identity };
        let mut store = ParamStore::new();
        let p = AttnParams::new(&mut store, &mut rng, "a", qd, vd, ad, sigma);
        let n = rng.gen_range(1..10);
        let scale = rng.gen_range(0.1..20.0);
        let q: Vec<f64> = (0..qd).map(|_| rng.gen_range(-scale..scale)).collect();
        let vals: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..vd).map(|_| rng.gen_range(-scale..scale)).collect())
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let qv = tape.input(&q).unwrap();
            let vs: Vec<Var> = order.iter().map(|&j| tape.input(&vals[j]).unwrap()).collect();
            let o = ptd_core::nn::attn(&mut tape, &store, &p, qv, &vs).unwrap();
            (tape.value(o.message).to_vec(), tape.value(o.weights).to_vec())
        };
        let identity: Vec<usize> = (0..n).collect();
        let (m, w) = run(&identity);
        let (mp, wp) = run(&perm);
        res.normalization = res.normalization.max((w.iter().sum::<f64>() - 1.0).abs());
        res.permutation = res.permutation.max(max_abs_diff(&m, &mp));
        for (k, &j) in perm.iter().enumerate() {
            res.permutation = res.permutation.max((wp[k] - w[j]).abs());
        }
    }
    res
}

/// Scripted checks of the switch state machine and its coupling to the
/// transient channel; returns the first violated rule.
pub fn switch_mechanics(seed: u64) -> Result<(), String> {
    // threshold and event alternation on scripted scores
    let mut tape = Tape::new();
    let mut st = SwitchState::new(&mut tape, 0, 4);
    if switch_decide(&mut st, THRESHOLD) != SwitchEvent::Spawn || !st.on {
        return Err("score 0.5 must switch on".into());
    }
    if switch_decide(&mut st, THRESHOLD) != SwitchEvent::None {
        return Err("score 0.5 while on must keep the session".into());
    }
    if switch_decide(&mut st, THRESHOLD - 1e-12) != SwitchEvent::Terminate {
        return Err("score just below 0.5 must switch off".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = SwitchState::new(&mut tape, 0, 4);
    let mut last = SwitchEvent::Terminate;
    for _ in 0..2000 {
        let p = match rng.gen_range(0..4) {
            0 => THRESHOLD,
            _ => rng.gen_range(0.0..1.0),
        };
        let was_on = st.on;
        let ev = switch_decide(&mut st, p);
        if st.on != (p >= THRESHOLD) {
            return Err(format!("status disagrees with threshold at p = {p}"));
        }
        match ev {
            SwitchEvent::None => {
                if was_on != st.on {
                    return Err("status changed without an event".into());
                }
            }
            e => {
                if e == last {
                    return Err(format!("two consecutive {e:?} events"));
                }
                last = e;
            }
        }
    }

    // whole-model runs: p <= gamma, alternating events, frozen leaves
    let (mut spawns, mut frozen) = (0usize, 0usize);
    for (k, mode) in [ptd_core::config::SwitchMode::Learned, ptd_core::config::SwitchMode::On]
        .into_iter()
        .enumerate()
    {
        let mut cfg = small_config(mode);
        // a small beta keeps the learned switch firing on an untrained model
        cfg.beta_init = 1e-4;
        let model = PtdModel::new(cfg, seed + k as u64).unwrap();
        let gen = short_gen(24);
        for i in 0..gen.num_scenes {
            let scene = generate_scene(&gen, i).unwrap();
            let mut tape = Tape::new();
            let layout = Layout::from_scene(&scene);
            let mut state = ModelState::new(&mut tape, &model, layout.clone()).unwrap();
            let mut last: BTreeMap<usize, SwitchEvent> = BTreeMap::new();
            for t in 0..scene.num_steps() {
                let before: BTreeMap<(usize, usize), (Var, Vec<f64>)> = state
                    .sessions
                    .iter()
                    .flat_map(|(&c, s)| s.leaf_hidden.iter().map(move |(&l, &h)| ((c, l), h)))
                    .map(|(key, h)| (key, (h, tape.value(h).to_vec())))
                    .collect();
                let features: Vec<Var> = layout
                    .features_at(&scene, t)
                    .into_iter()
                    .map(|f| tape.input(f).unwrap())
                    .collect();
                let step = model_step(&mut tape, &mut state, &features).unwrap();
                for h in &step.humans {
                    if h.value > h.gamma {
                        return Err(format!("score {} above gamma {}", h.value, h.gamma));
                    }
                    if h.event != SwitchEvent::None {
                        spawns += (h.event == SwitchEvent::Spawn) as usize;
                        let prev = last.insert(h.human, h.event);
                        let expected = if prev == Some(SwitchEvent::Spawn) {
                            SwitchEvent::Terminate
                        } else {
                            SwitchEvent::Spawn
                        };
                        if h.event != expected {
                            return Err(format!("{:?} after {prev:?}", h.event));
                        }
                    }
                }
                for (&c, s) in &state.sessions {
                    if s.start_time == t {
                        continue;
                    }
                    for &l in &s.graph.leaves {
                        if s.graph.outward.contains(&l) {
                            continue;
                        }
                        let (var, val) = &before[&(c, l)];
                        if s.leaf_hidden[&l] != *var || tape.value(*var) != &val[..] {
                            return Err(format!("leaf {l} outside the outward set was updated at step {t}"));
                        }
                        frozen += 1;
                    }
                }
            }
        }
    }
    if spawns < 10 || frozen < 10 {
        return Err(format!("script too weak: {spawns} spawns, {frozen} frozen-leaf checks"));
    }
    Ok(())
}

/// Line numbers reported for a file whose lines are all valid except the
/// given (line, replacement) pairs, each read on its own.
pub fn malformed_cases() -> Vec<(&'static str, String, &'static str)> {
    let good = serde_json::to_string(&generate_scene(&short_gen(1), 0).unwrap()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
    let mut missing_labels = v.clone();
    missing_labels.as_object_mut().unwrap().remove("switch_labels");
    let mut short_features = v.clone();
    short_features["entities"][0]["features"][0].as_array_mut().unwrap().pop();
    let mut bad_label = v.clone();
    bad_label["switch_labels"]["0"][0] = serde_json::json!(2);
    v["dt"] = serde_json::json!(-0.1);
    vec![
        ("missing labels", missing_labels.to_string(), "switch_labels"),
        ("short feature vector", short_features.to_string(), "entities.features"),
        ("label outside {0,1}", bad_label.to_string(), "switch_labels"),
        ("negative dt", v.to_string(), "dt"),
        ("truncated json", good[..good.len() / 2].to_string(), "record"),
    ]
}

/// Round trip of `n` generated scenes through a file plus line-accurate
/// rejection of each malformed case; returns the first failure.
pub fn dataset_io_check(n: usize) -> Result<(), String> {
    use ptd_core::error::Error;
    use ptd_core::scene::{read_dataset, write_dataset};
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = ptd_core::synth::GenConfig {
        num_scenes: n,
        ..ptd_core::synth::GenConfig::default()
    };
    let scenes = ptd_core::synth::generate_dataset(&gen).map_err(|e| e.to_string())?;
    let path = dir.path().join("scenes.jsonl");
    write_dataset(&scenes, &path).map_err(|e| e.to_string())?;
    let back = read_dataset(&path).map_err(|e| e.to_string())?;
    if back != scenes {
        return Err("read(write(scenes)) differs".into());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    for (k, (name, bad, field)) in malformed_cases().into_iter().enumerate() {
        let at = 3 + 7 * k;
        let mut edited: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        edited[at - 1] = bad;
        let p = dir.path().join(format!("bad{k}.jsonl"));
        std::fs::write(&p, edited.join("\n") + "\n").map_err(|e| e.to_string())?;
        match read_dataset(&p) {
            Err(Error::Parse { line, field: f, .. }) if line == at && f == field => {}
            other => return Err(format!("{name}: expected line {at} field {field}, got {other:?}")),
        }
    }
    Ok(())
}

pub struct LossCheck {
    pub pred_at_truth: f64,
    /// max |L_switch - ln 2| over label patterns at all-0.5 scores
    pub switch_at_half: f64,
    /// max |total(lambda) - (pred + lambda * switch)| over lambda in {0, 1, 2}
    pub linearity: f64,
}

pub fn loss_check() -> LossCheck {
    use ptd_core::train::{compute_loss, prediction_loss, switch_loss};
    let scene = interaction_scene();
    let layout = Layout::from_scene(&scene);
    let mut tape = Tape::new();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for t in 0..scene.num_steps() {
        for f in layout.features_at(&scene, t) {
            preds.push(tape.input(f).unwrap());
            targets.push(f);
        }
    }
    let l = prediction_loss(&mut tape, &preds, &targets, 1000.0).unwrap();
    let pred_at_truth = tape.scalar(l).abs();

    let mut switch_at_half = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1, 2, 7, 60] {
        let scores: Vec<Var> = (0..n).map(|_| tape.input(&[0.5]).unwrap()).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        let s = switch_loss(&mut tape, &scores, &labels).unwrap();
        switch_at_half = switch_at_half.max((tape.scalar(s) - std::f64::consts::LN_2).abs());
    }

    let model = PtdModel::new(small_config(ptd_core::config::SwitchMode::Learned), 3).unwrap();
    let mut linearity = 0.0f64;
    for lambda in [0.0, 1.0, 2.0] {
        let mut tape = Tape::new();
        let out = ptd_core::model::rollout(&mut tape, &model, &scene).unwrap();
        let loss = compute_loss(&mut tape, &model.config, &out, &scene, lambda).unwrap();
        let expect = tape.scalar(loss.pred) + lambda * tape.scalar(loss.switch.unwrap());
        linearity = linearity.max((tape.scalar(loss.total) - expect).abs());
    }
    LossCheck {
        pred_at_truth,
        switch_at_half,
        linearity,
    }
}

/// Generates, trains, evaluates and writes a report twice from the same
/// seeds, comparing every artifact byte for byte.
pub fn determinism_check() -> Result<(), String> {
    use ptd_core::eval::evaluate;
    use ptd_core::report::{emit_report, trace_scene};
    use ptd_core::train::{metrics_csv, train, TrainConfig};
    let run = |dir: &std::path::Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let scenes = ptd_core::synth::generate_dataset(&short_gen(12)).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&small_config(ptd_core::config::SwitchMode::Learned), &tc, &scenes).map_err(|e| e.to_string())?;
        let report = evaluate(&out.model, &out.validation).map_err(|e| e.to_string())?;
        let trace = trace_scene(&out.model, &out.validation[0]).map_err(|e| e.to_string())?;
        let files = emit_report(&report, None, Some(&trace), dir).map_err(|e| e.to_string())?;
        let mut artifacts = vec![
            ("metrics.csv".to_string(), metrics_csv(&out.log).into_bytes()),
            ("model".to_string(), serde_json::to_vec(&out.model).unwrap()),
        ];
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| e.to_string())?;
            artifacts.push((f.file_name().unwrap().to_string_lossy().into_owned(), bytes));
        }
        Ok(artifacts)
    };
    let a_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run(a_dir.path())?;
    let b = run(b_dir.path())?;
    if a.len() != b.len() {
        return Err("different artifact sets".into());
    }
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        if na != nb || ba != bb {
            return Err(format!("{na} differs between runs"));
        }
    }
    Ok(())
}
