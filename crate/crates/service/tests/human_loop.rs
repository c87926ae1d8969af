use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use hypsel_core::acoustic_model::model_bytes;
use hypsel_core::corpus::GenerationConfig;
use hypsel_core::experiment::{initial_model, prepare, ArmKind, ExperimentConfig, NetworkConfig};
use hypsel_core::feedback::word_error_rate;
use hypsel_core::trainer::{decode_batch, run_campaign, OracleSelector};
use hypsel_service::log::SelectionLog;
use hypsel_service::session::render_words;
use hypsel_service::{router, HumanSelector, ServiceConfig, ServiceState};
use serde_json::Value;
use tower::ServiceExt;

fn one_stage() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        corpus: GenerationConfig {
            vocab_size: 6,
            num_labeled: 60,
            num_batches: 1,
            batch_size: 25,
            num_eval: 20,
            ..GenerationConfig::default()
        },
        network: NetworkConfig { splice: 1, hidden_layers: vec![16] },
        ..ExperimentConfig::default()
    };
    c.baseline.max_epochs = 4;
    c.stage.max_iterations_per_epoch = 2;
    c
}

async fn call(state: &Arc<ServiceState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
    let resp = router(Arc::clone(state), None).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[test]
fn scripted_client_reproduces_the_oracle_campaign() {
    let config = one_stage();
    let prepared = prepare(&config).unwrap();
    let initial = initial_model::<f64>(&config, &prepared).unwrap().model;
    let arm = config.arm(ArmKind::Rl);
    let oracle = run_campaign(&initial, &prepared.data(), &arm, &mut OracleSelector).unwrap();

    // What the annotator knows: the reference and both transcripts of each utterance.
    let batch = &prepared.split.large_batches[0];
    let decoded = decode_batch(0, &initial, batch, &prepared.graph, &arm, &[Arc::new(initial.clone())]).unwrap();
    let better: HashMap<String, String> = batch
        .iter()
        .zip(&decoded.pairs)
        .map(|(u, p)| {
            let w1 = word_error_rate(&p.candidate1.words, &u.reference).unwrap().wer;
            let w2 = word_error_rate(&p.candidate2.words, &u.reference).unwrap().wer;
            let pick = if w1 <= w2 { &p.candidate1 } else { &p.candidate2 };
            (u.id.clone(), render_words(&pick.words))
        })
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let state = ServiceState::new(ServiceConfig { log_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() });
    let human = std::thread::scope(|scope| {
        let worker = scope.spawn(|| {
            let mut selector = HumanSelector { state: Arc::clone(&state), timeout: Some(Duration::from_secs(300)) };
            run_campaign(&initial, &prepared.data(), &arm, &mut selector)
        });
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let mut answered = 0;
            while answered < batch.len() {
                let (code, body) = call(&state, "GET", "/api/pair", None).await;
                if code == StatusCode::CONFLICT || body["status"] == "exhausted" {
                    std::thread::sleep(Duration::from_millis(20));
                    continue;
                }
                let t = &body["ticket"];
                let target = &better[t["utterance_id"].as_str().unwrap()];
                let choice = if t["left"].as_str().unwrap() == target { "left" } else { "right" };
                let uri = format!("/api/pair/{}/selection", t["ticket"].as_str().unwrap());
                let (code, _) = call(&state, "POST", &uri, Some(format!(r#"{{"choice":"{choice}"}}"#))).await;
                assert_eq!(code, StatusCode::OK);
                answered += 1;
            }
        });
        worker.join().unwrap().unwrap()
    });

    let log = SelectionLog::open(&dir.path().join("selections_stage_0.jsonl")).unwrap();
    let logged: HashMap<&str, u8> = log.entries().iter().map(|e| (e.utterance_id.as_str(), e.r)).collect();
    assert_eq!(logged.len(), batch.len());
    for record in &oracle.pairs[0] {
        assert_eq!(logged[record.utterance_id.as_str()], record.r, "{}", record.utterance_id);
    }
    assert_eq!(model_bytes(human.models[1].as_ref()), model_bytes(oracle.models[1].as_ref()));
}
