mod common;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::routing::post;
use axum::{Json, Router};
use image::{Rgb, RgbImage};

use sketchscene::backend::wire::{handle_backend_request, AdapterRequest, AdapterResponse};
use sketchscene::backend::{Backend, EmbeddingBindings, RemoteBackend, ToyBackend, Transport};
use sketchscene::compose::compose_guide;
use sketchscene::diffusion::{make_schedule, ScheduleKind, SeededNoise};
use sketchscene::inference::{run_scene_inference, InferenceRequest, PromptPair};
use sketchscene::objects::generate_objects;
use sketchscene::backend::StubAdapters;
use sketchscene::scene::{RenderConfig, Resolution};
use sketchscene::Error;

/// Serves the toy backend over HTTP on an ephemeral port.
fn spawn_model_server(outdir: PathBuf) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let toy = Arc::new(ToyBackend::new());
            let app = Router::new().route(
                "/",
                post(move |Json(req): Json<AdapterRequest>| {
                    let (toy, outdir) = (Arc::clone(&toy), outdir.clone());
                    async move {
                        let resp: AdapterResponse = tokio::task::spawn_blocking(move || {
                            handle_backend_request(toy.as_ref(), &req, &outdir)
                        })
                        .await
                        .unwrap();
                        Json(resp)
                    }
                }),
            );
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn remote(addr: SocketAddr, workdir: PathBuf) -> RemoteBackend {
    RemoteBackend::new(
        ToyBackend::new().profile().clone(),
        Transport::Http {
            endpoint: format!("http://{addr}/"),
            timeout_secs: 30,
        },
        workdir,
    )
}

#[test]
fn remote_calls_match_the_local_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let addr = spawn_model_server(tmp.path().join("server"));
    let remote = remote(addr, tmp.path().join("client"));
    let toy = ToyBackend::new();

    let img = RgbImage::from_fn(8, 6, |x, y| Rgb([(x * 31) as u8, (y * 40) as u8, 200]));
    let z = toy.encode_image(&img).unwrap();
    assert_eq!(remote.encode_image(&img).unwrap(), z);
    assert_eq!(remote.decode_latent(&z).unwrap(), toy.decode_latent(&z).unwrap());
    assert_eq!(remote.token_embedding("chair").unwrap(), toy.token_embedding("chair").unwrap());

    let bindings = EmbeddingBindings::new().bind("<obj-a>", vec![0.25; 16]);
    let cond = toy.encode_prompt("a <obj-a> in a room", &bindings).unwrap();
    assert_eq!(remote.encode_prompt("a <obj-a> in a room", &bindings).unwrap(), cond);
    let zt = SeededNoise::new(4).initial_latent(z.shape());
    assert_eq!(remote.predict_noise(&zt, 7, &cond).unwrap(), toy.predict_noise(&zt, 7, &cond).unwrap());
}

#[test]
fn remote_scene_inference_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let addr = spawn_model_server(tmp.path().join("server"));
    let remote = remote(addr, tmp.path().join("client"));
    let toy = ToyBackend::new();

    let spec = common::two_object_scene("remote");
    let assets = generate_objects(&spec, 1, &StubAdapters, 2, None).unwrap();
    let guide = compose_guide(&spec, &assets, 2).unwrap();
    let cfg = RenderConfig {
        steps: 6,
        alpha: 0.5,
        seed: 9,
        resolution: Resolution { width: 32, height: 32 },
        ..RenderConfig::default()
    };
    let prompts = PromptPair {
        global_prompt: "a chair and a table in a room".into(),
        background_prompt: "a room".into(),
    };
    let bindings = EmbeddingBindings::new();
    let sched = make_schedule(6, ScheduleKind::ScaledLinear).unwrap();
    let req = InferenceRequest {
        guide: &guide,
        config: &cfg,
        prompts: &prompts,
        bindings: &bindings,
    };
    let local = run_scene_inference(req, &toy, &sched, &mut |_| {}).unwrap();
    let over_wire = run_scene_inference(req, &remote, &sched, &mut |_| {}).unwrap();
    assert_eq!(local, over_wire);
}

#[test]
fn unreachable_server_is_a_connectivity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let remote = remote(port, tmp.path().to_path_buf());
    let err = remote.token_embedding("chair").unwrap_err();
    assert!(matches!(err, Error::Connectivity(_)), "{err}");
}
