//! Starts the HTTP service on an ephemeral port, uploads the demo scene,
//! submits a render job, follows its progress and downloads the image.

mod common;

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use sketchscene::config::Config;
use sketchscene::raster::encode_png_gray;
use sketchscene::service::{router, Service};

fn main() {
    let out = common::out_dir("http_service");
    let svc = Service::with_pipeline(Config::default().build_pipeline().unwrap(), &out, 2).unwrap();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        tokio::runtime::Runtime::new().unwrap().block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(svc)).await.unwrap();
        })
    });
    let base = format!("http://{}", rx.recv().unwrap());
    let http = reqwest::blocking::Client::new();

    let spec = common::demo_scene();
    let sketch = encode_png_gray(&spec.sketch).unwrap();
    let resp = http
        .post(format!("{base}/scenes"))
        .json(&json!({
            "document": spec.to_document(),
            "sketch_png": base64::engine::general_purpose::STANDARD.encode(sketch),
        }))
        .send()
        .unwrap();
    println!("POST /scenes -> {}", resp.status());
    if resp.status() == 409 {
        println!("scene already exists in {}, reusing it", out.display());
    }

    let job: Value = http
        .post(format!("{base}/scenes/demo/render"))
        .json(&json!({"alpha": 0.5, "seed": 11, "steps": 25}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let id = job["job_id"].as_str().unwrap();
    println!("submitted {id}");

    let mut from = 0;
    let done = loop {
        let resp = http
            .get(format!("{base}/jobs/{id}/events?from={from}&wait_ms=2000"))
            .send()
            .unwrap();
        let status = resp.headers()["x-job-status"].to_str().unwrap().to_owned();
        from = resp.headers()["x-next-from"].to_str().unwrap().parse().unwrap();
        for line in resp.text().unwrap().lines() {
            let e: Value = serde_json::from_str(line).unwrap();
            if e["step"].as_u64().unwrap_or(0).is_multiple_of(5) {
                println!("  {} {}/{}", e["note"], e["step"], e["total"]);
            }
        }
        if status == "succeeded" || status == "failed" {
            break http.get(format!("{base}/jobs/{id}")).send().unwrap().json::<Value>().unwrap();
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    println!("job {}: {}", id, done["status"]);

    if let Some(image) = done["outputs"]
        .as_array()
        .into_iter()
        .flatten()
        .find(|a| a["name"].as_str().is_some_and(|n| n.starts_with("renders/") && n.ends_with("/image.png")))
    {
        let bytes = http
            .get(format!("{base}/artifacts/{}", image["hash"].as_str().unwrap()))
            .send()
            .unwrap()
            .bytes()
            .unwrap();
        let path = out.join("render.png");
        std::fs::write(&path, &bytes).unwrap();
        println!("downloaded {} bytes to {}", bytes.len(), path.display());
    }
}
