//! Adapter wire contract shared by out-of-process model servers.
//!
//! A request names an operation and points at payload files on a shared
//! filesystem; the response points at the artifact files the server wrote.
//! Requests travel as one JSON document, either as an HTTP POST body or as
//! a single line on a child process's stdin.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub op: String,
    /// Named payload files.
    #[serde(default)]
    pub payload: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub prompt_text: String,
    #[serde(default)]
    pub seed: u64,
    /// `[width, height]` of the requested output, when it is a raster.
    #[serde(default)]
    pub resolution: Option<[u32; 2]>,
    /// Operation-specific scalars (timestep, guidance scale, class label, ...).
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl AdapterRequest {
    pub fn new(op: &str) -> Self {
        Self {
            op: op.to_owned(),
            payload: BTreeMap::new(),
            prompt_text: String::new(),
            seed: 0,
            resolution: None,
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub status: AdapterStatus,
    #[serde(default)]
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub message: Option<String>,
}

impl AdapterResponse {
    pub fn ok(artifacts: BTreeMap<String, PathBuf>) -> Self {
        Self {
            status: AdapterStatus::Ok,
            artifacts,
            message: None,
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self {
            status: AdapterStatus::Error,
            artifacts: BTreeMap::new(),
            message: Some(message.into()),
        }
    }

    pub fn artifact(&self, name: &str) -> Result<&PathBuf> {
        self.artifacts.get(name).ok_or_else(|| {
            Error::ContractViolation(format!("response is missing artifact {name:?}"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transport {
    Http {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    Stdio {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

fn default_timeout() -> u64 {
    300
}

impl Transport {
    pub fn call(&self, request: &AdapterRequest) -> Result<AdapterResponse> {
        let response = match self {
            Transport::Http {
                endpoint,
                timeout_secs,
            } => {
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(*timeout_secs))
                    .build()
                    .map_err(|e| Error::Connectivity(e.to_string()))?;
                let resp = client
                    .post(endpoint)
                    .json(request)
                    .send()
                    .map_err(|e| Error::Connectivity(format!("{endpoint}: {e}")))?;
                let bytes = resp
                    .bytes()
                    .map_err(|e| Error::Connectivity(format!("{endpoint}: {e}")))?;
                serde_json::from_slice::<AdapterResponse>(&bytes)
                    .map_err(|e| Error::ContractViolation(format!("malformed response: {e}")))?
            }
            Transport::Stdio { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Connectivity(format!("{}: {e}", program.display())))?;
                {
                    let mut stdin = child.stdin.take().expect("stdin is piped");
                    let mut line = serde_json::to_vec(request)?;
                    line.push(b'\n');
                    stdin
                        .write_all(&line)
                        .map_err(|e| Error::Connectivity(e.to_string()))?;
                }
                let out = child
                    .wait_with_output()
                    .map_err(|e| Error::Connectivity(e.to_string()))?;
                let first = out
                    .stdout
                    .split(|&b| b == b'\n')
                    .find(|l| !l.is_empty())
                    .unwrap_or_default();
                serde_json::from_slice::<AdapterResponse>(first)
                    .map_err(|e| Error::ContractViolation(format!("malformed response: {e}")))?
            }
        };
        if response.status == AdapterStatus::Error {
            return Err(Error::ContractViolation(
                response
                    .message
                    .unwrap_or_else(|| "adapter reported an error".into()),
            ));
        }
        Ok(response)
    }
}

/// Hash identifying a request for record/replay: the request document plus
/// the bytes of every payload it references.
pub fn request_hash(op: &str, fields: &serde_json::Value, payloads: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    h.update(op.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(fields).expect("json value serializes"));
    for p in payloads {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

const LATENT_MAGIC: &[u8; 4] = b"SSLT";
const MATRIX_MAGIC: &[u8; 4] = b"SSEM";

/// Latent payload: `SSLT`, three little-endian u32 dims `(C, h, w)`, then f64 values.
pub fn latent_to_bytes(z: &crate::diffusion::LatentTensor) -> Vec<u8> {
    let (c, h, w) = z.shape();
    let mut out = Vec::with_capacity(16 + z.len() * 8);
    out.extend_from_slice(LATENT_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in z.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn latent_from_bytes(bytes: &[u8]) -> Result<crate::diffusion::LatentTensor> {
    let bad = || Error::ContractViolation("malformed latent payload".into());
    if bytes.len() < 16 || &bytes[..4] != LATENT_MAGIC {
        return Err(bad());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let values = f64s(&bytes[16..]).ok_or_else(bad)?;
    crate::diffusion::LatentTensor::from_vec(c, h, w, values).map_err(|_| bad())
}

/// Matrix payload: `SSEM`, little-endian u32 rows and cols, then f64 values row-major.
pub fn matrix_to_bytes(rows: &[Vec<f64>]) -> Vec<u8> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(12 + rows.len() * cols * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in rows.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let bad = || Error::ContractViolation("malformed matrix payload".into());
    if bytes.len() < 12 || &bytes[..4] != MATRIX_MAGIC {
        return Err(bad());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let values = f64s(&bytes[12..]).ok_or_else(bad)?;
    if values.len() != rows * cols {
        return Err(bad());
    }
    if cols == 0 {
        return Ok(vec![Vec::new(); rows]);
    }
    Ok(values.chunks(cols).map(<[f64]>::to_vec).collect())
}

fn f64s(bytes: &[u8]) -> Option<Vec<f64>> {
    bytes.len().is_multiple_of(8).then(|| {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    })
}

/// Reference server-side handler for the backend operations
/// (`encode_image`, `decode_latent`, `token_embedding`, `predict_noise`).
/// Output files are written into `outdir`.
pub fn handle_backend_request(
    backend: &dyn super::Backend,
    request: &AdapterRequest,
    outdir: &std::path::Path,
) -> AdapterResponse {
    match serve_backend(backend, request, outdir) {
        Ok(artifacts) => AdapterResponse::ok(artifacts),
        Err(e) => AdapterResponse::error(e.to_string()),
    }
}

fn serve_backend(
    backend: &dyn super::Backend,
    req: &AdapterRequest,
    outdir: &std::path::Path,
) -> Result<BTreeMap<String, PathBuf>> {
    let payload = |name: &str| -> Result<Vec<u8>> {
        let path = req
            .payload
            .get(name)
            .ok_or_else(|| Error::ContractViolation(format!("missing payload {name:?}")))?;
        std::fs::read(path).map_err(|e| Error::io(path, e))
    };
    let emit = |name: &str, ext: &str, bytes: Vec<u8>| -> Result<BTreeMap<String, PathBuf>> {
        let digest = request_hash(name, &serde_json::Value::Null, &[&bytes]);
        let path = outdir.join(format!("{digest}.{ext}"));
        crate::store::write_atomic(&path, &bytes)?;
        Ok(BTreeMap::from([(name.to_owned(), path)]))
    };
    match req.op.as_str() {
        "encode_image" => {
            let img = crate::raster::decode_png_rgb(&payload("image")?)?;
            emit("latent", "latent", latent_to_bytes(&backend.encode_image(&img)?))
        }
        "decode_latent" => {
            let z = latent_from_bytes(&payload("latent")?)?;
            emit("image", "png", crate::raster::encode_png_rgb(&backend.decode_latent(&z)?)?)
        }
        "token_embedding" => {
            let v = backend.token_embedding(&req.prompt_text)?;
            emit("vector", "mat", matrix_to_bytes(&[v]))
        }
        "predict_noise" => {
            let z = latent_from_bytes(&payload("latent")?)?;
            let rows = matrix_from_bytes(&payload("prompt_embedding")?)?;
            let t = req
                .params
                .get("t")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::ContractViolation("missing param t".into()))?;
            let guidance_scale = req
                .params
                .get("guidance_scale")
                .and_then(|v| v.as_f64())
                .unwrap_or(0.0);
            let cond = super::PromptEncoding {
                prompt_text: req.prompt_text.clone(),
                token_ids: Vec::new(),
                embedding_matrix: rows,
                identity_slots: Vec::new(),
                guidance_scale,
            };
            let eps = backend.predict_noise(&z, t as usize, &cond)?;
            emit("latent", "latent", latent_to_bytes(&eps))
        }
        other => Err(Error::ContractViolation(format!("unknown op {other:?}"))),
    }
}
