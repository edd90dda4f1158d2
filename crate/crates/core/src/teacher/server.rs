//! HTTP service that puts a locally trained model behind the black-box boundary.
//!
//! Only softmax probabilities leave the process: no logits, gradients or weights.
//! Status codes: 400 malformed request, 413 batch larger than `batch_limit`,
//! 503 no model loaded.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::wire::{ErrorResponse, InfoResponse, PredictRequest, PredictResponse};
use crate::data::{ImageSet, SourceTag};
use crate::error::{Error, Result};
use crate::nn::{Classifier, Shape3};

struct ServiceState {
    model: Option<Arc<Classifier>>,
    input_shape: Shape3,
    num_classes: usize,
    batch_limit: usize,
}

/// A running teacher service. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the service stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Options for a service that may start without a model (answering 503).
#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    pub input_shape: Shape3,
    pub num_classes: usize,
    pub batch_limit: usize,
}

/// Serves `model` on `addr` (port 0 picks a free port). Returns once the socket is bound.
pub fn serve_teacher(model: Classifier, addr: SocketAddr, batch_limit: usize) -> Result<ServerHandle> {
    let opts = ServeOptions { input_shape: model.input_shape(), num_classes: model.num_classes(), batch_limit };
    serve(Some(model), addr, opts)
}

pub fn serve(model: Option<Classifier>, addr: SocketAddr, opts: ServeOptions) -> Result<ServerHandle> {
    if opts.batch_limit == 0 {
        return Err(Error::argument("batch_limit must be positive"));
    }
    if let Some(m) = &model {
        if m.input_shape() != opts.input_shape || m.num_classes() != opts.num_classes {
            return Err(Error::consistency("serve options disagree with the model"));
        }
    }
    let (h, w, c) = opts.input_shape;
    // JSON floats are at most ~16 bytes each
    let body_limit = (opts.batch_limit + 1) * h * w * c * 16 + (1 << 20);
    let state = Arc::new(ServiceState {
        model: model.map(Arc::new),
        input_shape: opts.input_shape,
        num_classes: opts.num_classes,
        batch_limit: opts.batch_limit,
    });
    let app = Router::new()
        .route("/predict", post(predict))
        .route("/info", get(info))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state);

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| Error::Startup(e.to_string()))?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(addr))
        .map_err(|e| Error::Startup(format!("cannot bind {addr}: {e}")))?;
    let bound = listener.local_addr().map_err(|e| Error::Startup(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("teacher-serve".into())
        .spawn(move || {
            rt.block_on(async move {
                let server = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("teacher service stopped: {e}");
                }
            });
        })
        .map_err(|e| Error::Startup(e.to_string()))?;
    log::info!("teacher service listening on {bound}");
    Ok(ServerHandle { addr: bound, shutdown: Some(tx), thread: Some(thread) })
}

fn reject(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorResponse { error: msg.into() })).into_response()
}

async fn info(State(st): State<Arc<ServiceState>>) -> Response {
    let (h, w, c) = st.input_shape;
    Json(InfoResponse { num_classes: st.num_classes, input_shape: [h, w, c], batch_limit: st.batch_limit }).into_response()
}

async fn predict(State(st): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let Some(model) = st.model.clone() else {
        return reject(StatusCode::SERVICE_UNAVAILABLE, "model not loaded");
    };
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let (h, w, c) = st.input_shape;
    let [n, rh, rw, rc] = req.shape[..] else {
        return reject(StatusCode::BAD_REQUEST, "shape must have four entries [n, h, w, c]");
    };
    if (rh, rw, rc) != (h, w, c) {
        return reject(StatusCode::BAD_REQUEST, format!("image shape {rh}x{rw}x{rc}, expected {h}x{w}x{c}"));
    }
    if n > st.batch_limit {
        return reject(StatusCode::PAYLOAD_TOO_LARGE, format!("batch of {n} exceeds limit {}", st.batch_limit));
    }
    if req.images.len() != n * h * w * c {
        return reject(StatusCode::BAD_REQUEST, format!("{} pixels for shape {:?}", req.images.len(), req.shape));
    }
    let data = match ndarray::Array4::from_shape_vec((n, h, w, c), req.images) {
        Ok(d) => d,
        Err(e) => return reject(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let images = match ImageSet::new(data, SourceTag::Original) {
        Ok(i) => i,
        Err(e) => return reject(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let result = tokio::task::spawn_blocking(move || model.predict_proba(&images)).await;
    match result {
        Ok(Ok(probs)) => {
            let probs = probs.rows().into_iter().map(|r| r.to_vec()).collect();
            Json(PredictResponse { probs }).into_response()
        }
        Ok(Err(e)) => reject(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
