//! The only path to the black-box teacher.
//!
//! A [`TeacherGateway`] wraps a backend (an in-process model or the HTTP service
//! in [`server`]) and adds batching, a content-addressed response cache and a
//! [`QueryLedger`]. Backends expose class probabilities only.

pub mod server;
pub mod wire;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nn::{Classifier, Shape3};
use wire::{ErrorResponse, InfoResponse, PredictRequest, PredictResponse};

/// Row-sum tolerance for probability vectors.
pub const SIMPLEX_TOL: f32 = 1e-5;

/// Teacher (or student) class probabilities, one simplex row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    probs: Array2<f32>,
}

impl SoftLabelSet {
    pub fn new(probs: Array2<f32>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            check_simplex(row).map_err(|msg| Error::consistency(format!("row {i}: {msg}")))?;
        }
        Ok(Self { probs })
    }

    pub fn empty(num_classes: usize) -> Self {
        Self { probs: Array2::zeros((0, num_classes)) }
    }

    /// One-hot rows for integer labels.
    pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut probs = Array2::zeros((labels.len(), num_classes));
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::argument(format!("label {l} out of range for {num_classes} classes")));
            }
            probs[[i, l]] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f32> {
        &self.probs
    }

    pub fn into_probs(self) -> Array2<f32> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self { probs: self.probs.select(ndarray::Axis(0), indices) }
    }

    pub fn concat(parts: &[&SoftLabelSet]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.probs.view()).collect();
        let probs = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::consistency(e.to_string()))?;
        Ok(Self { probs })
    }
}

fn check_simplex(row: ArrayView1<'_, f32>) -> std::result::Result<(), String> {
    if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("probability {v} outside [0, 1]"));
    }
    let s: f32 = row.sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("row sums to {s}"));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row argmax of soft labels.
pub fn derive_hard_labels(soft: &SoftLabelSet) -> Vec<usize> {
    soft.probs.rows().into_iter().map(argmax).collect()
}

/// Monotone counters of teacher traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    /// Images actually dispatched to the backend.
    pub total_images_sent: u64,
    /// Images answered from the cache.
    pub cache_hits: u64,
    /// Backend calls.
    pub batches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    InProcess,
    Remote,
}

/// How to reach the teacher. For `remote` the address is the service base URL;
/// for `in_process` it is the path of a classifier checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEndpoint {
    pub kind: EndpointKind,
    pub address: String,
    pub batch_limit: usize,
}

impl TeacherEndpoint {
    pub fn validate(&self) -> Result<()> {
        if self.batch_limit == 0 {
            return Err(Error::argument("teacher batch_limit must be positive"));
        }
        Ok(())
    }
}

/// Description of a teacher service.
pub type TeacherInfo = InfoResponse;

/// Something that maps images to class probabilities and nothing else.
pub trait TeacherBackend: Send + Sync {
    fn info(&self) -> TeacherInfo;

    /// Probabilities for one batch no larger than `info().batch_limit`.
    fn predict_batch(&self, images: &ImageSet) -> Result<Array2<f32>>;
}

/// A locally held model behind the black-box interface. The model is private;
/// the only way out is [`TeacherBackend::predict_batch`].
pub struct InProcessTeacher {
    model: Classifier,
    batch_limit: usize,
}

impl InProcessTeacher {
    pub fn new(model: Classifier, batch_limit: usize) -> Self {
        Self { model, batch_limit }
    }
}

impl TeacherBackend for InProcessTeacher {
    fn info(&self) -> TeacherInfo {
        let (h, w, c) = self.model.input_shape();
        TeacherInfo { num_classes: self.model.num_classes(), input_shape: [h, w, c], batch_limit: self.batch_limit }
    }

    fn predict_batch(&self, images: &ImageSet) -> Result<Array2<f32>> {
        self.model.predict_proba(images)
    }
}

/// HTTP client for a teacher served by [`server::serve_teacher`].
pub struct RemoteTeacher {
    base: String,
    agent: ureq::Agent,
    info: TeacherInfo,
    retries: usize,
}

impl RemoteTeacher {
    /// Connects and fetches `/info`.
    pub fn connect(base_url: &str) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = base_url.trim_end_matches('/').to_string();
        let mut me = Self {
            base,
            agent,
            info: TeacherInfo { num_classes: 0, input_shape: [0, 0, 0], batch_limit: 1 },
            retries: 3,
        };
        me.info = me.with_retries(|| me.fetch_info())?;
        Ok(me)
    }

    fn transport(&self, e: impl std::fmt::Display) -> Error {
        Error::Transport { url: self.base.clone(), msg: e.to_string() }
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retriable() && attempt + 1 < self.retries => {
                    attempt += 1;
                    log::warn!("teacher request failed ({e}); retry {attempt}");
                    std::thread::sleep(Duration::from_millis(200 * attempt as u64));
                }
                other => return other,
            }
        }
    }

    fn fetch_info(&self) -> Result<TeacherInfo> {
        let mut resp = self.agent.get(&format!("{}/info", self.base)).call().map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| self.transport(e))?;
        if status != 200 {
            return Err(protocol_error(status, &body));
        }
        serde_json::from_str(&body).map_err(|e| Error::Protocol { status, msg: format!("bad /info body: {e}") })
    }

    fn post_predict(&self, req: &PredictRequest) -> Result<PredictResponse> {
        let mut resp = self
            .agent
            .post(&format!("{}/predict", self.base))
            .send_json(req)
            .map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_string()
            .map_err(|e| self.transport(e))?;
        if status != 200 {
            return Err(protocol_error(status, &body));
        }
        serde_json::from_str(&body).map_err(|e| Error::Protocol { status, msg: format!("bad /predict body: {e}") })
    }
}

fn protocol_error(status: u16, body: &str) -> Error {
    let msg = serde_json::from_str::<ErrorResponse>(body).map(|e| e.error).unwrap_or_else(|_| body.to_string());
    Error::Protocol { status, msg }
}

impl TeacherBackend for RemoteTeacher {
    fn info(&self) -> TeacherInfo {
        self.info
    }

    fn predict_batch(&self, images: &ImageSet) -> Result<Array2<f32>> {
        let (h, w, c) = images.image_shape();
        let req = PredictRequest {
            shape: vec![images.len(), h, w, c],
            images: images.data().as_slice().expect("standard layout").to_vec(),
        };
        let resp = self.with_retries(|| self.post_predict(&req))?;
        let k = self.info.num_classes;
        if resp.probs.len() != images.len() || resp.probs.iter().any(|r| r.len() != k) {
            return Err(Error::Protocol { status: 200, msg: "response rows do not match request".into() });
        }
        let flat: Vec<f32> = resp.probs.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((images.len(), k), flat).expect("checked"))
    }
}

#[derive(Default)]
struct GatewayState {
    cache: HashMap<[u8; 32], Vec<f32>>,
    ledger: QueryLedger,
}

/// Batched, cached, accounted access to a teacher backend.
pub struct TeacherGateway {
    backend: Box<dyn TeacherBackend>,
    info: TeacherInfo,
    batch_limit: usize,
    cache_enabled: bool,
    degrade_to_top1: bool,
    state: Mutex<GatewayState>,
}

impl TeacherGateway {
    pub fn new(backend: Box<dyn TeacherBackend>) -> Self {
        let info = backend.info();
        Self {
            batch_limit: info.batch_limit.max(1),
            backend,
            info,
            cache_enabled: true,
            degrade_to_top1: false,
            state: Mutex::new(GatewayState::default()),
        }
    }

    pub fn in_process(model: Classifier, batch_limit: usize) -> Self {
        Self::new(Box::new(InProcessTeacher::new(model, batch_limit)))
    }

    pub fn remote(base_url: &str) -> Result<Self> {
        Ok(Self::new(Box::new(RemoteTeacher::connect(base_url)?)))
    }

    /// Opens a gateway for an endpoint description. The dispatch batch size is the
    /// smaller of the endpoint's and the backend's limits.
    pub fn open(endpoint: &TeacherEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let gw = match endpoint.kind {
            EndpointKind::InProcess => {
                Self::in_process(Classifier::load(Path::new(&endpoint.address))?, endpoint.batch_limit)
            }
            EndpointKind::Remote => Self::remote(&endpoint.address)?,
        };
        let limit = gw.batch_limit.min(endpoint.batch_limit);
        Ok(gw.with_batch_limit(limit))
    }

    pub fn with_cache(mut self, enabled: bool) -> Self {
        self.cache_enabled = enabled;
        self
    }

    /// Replace every soft response with the one-hot of its argmax, emulating a
    /// teacher that only reveals top-1 labels.
    pub fn with_degrade_to_top1(mut self, on: bool) -> Self {
        self.degrade_to_top1 = on;
        self
    }

    pub fn with_batch_limit(mut self, limit: usize) -> Self {
        self.batch_limit = limit.clamp(1, self.info.batch_limit.max(1));
        self
    }

    pub fn info(&self) -> TeacherInfo {
        self.info
    }

    pub fn num_classes(&self) -> usize {
        self.info.num_classes
    }

    pub fn input_shape(&self) -> Shape3 {
        let [h, w, c] = self.info.input_shape;
        (h, w, c)
    }

    pub fn ledger(&self) -> QueryLedger {
        self.state.lock().expect("gateway lock").ledger
    }

    /// Soft labels for every image. Cached answers are reused; each distinct
    /// uncached image is dispatched once.
    pub fn predict_soft(&self, images: &ImageSet) -> Result<SoftLabelSet> {
        if images.image_shape() != self.input_shape() {
            return Err(Error::argument(format!(
                "images are {:?}, teacher expects {:?}",
                images.image_shape(),
                self.input_shape()
            )));
        }
        let k = self.num_classes();
        let n = images.len();
        let keys: Vec<[u8; 32]> = (0..n).map(|i| content_key(images.pixels(i))).collect();

        let mut rows: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut pending: Vec<usize> = Vec::new();
        let mut first_of: HashMap<[u8; 32], usize> = HashMap::new();
        let mut hits = 0u64;
        {
            let st = self.state.lock().expect("gateway lock");
            for i in 0..n {
                if self.cache_enabled {
                    if let Some(r) = st.cache.get(&keys[i]) {
                        rows[i] = Some(r.clone());
                        hits += 1;
                        continue;
                    }
                    if first_of.contains_key(&keys[i]) {
                        hits += 1;
                        continue;
                    }
                    first_of.insert(keys[i], i);
                }
                pending.push(i);
            }
        }

        let mut fresh: Vec<(usize, Vec<f32>)> = Vec::with_capacity(pending.len());
        let mut batches = 0u64;
        for chunk in pending.chunks(self.batch_limit) {
            let batch = images.select(chunk)?;
            let probs = self.backend.predict_batch(&batch)?;
            batches += 1;
            if probs.dim() != (chunk.len(), k) {
                return Err(Error::consistency(format!(
                    "teacher returned {:?} for a batch of {}",
                    probs.dim(),
                    chunk.len()
                )));
            }
            for (row, &i) in probs.rows().into_iter().zip(chunk) {
                check_simplex(row).map_err(|msg| Error::Protocol { status: 200, msg: format!("teacher row: {msg}") })?;
                fresh.push((i, row.to_vec()));
            }
        }

        {
            let mut st = self.state.lock().expect("gateway lock");
            st.ledger.total_images_sent += fresh.len() as u64;
            st.ledger.cache_hits += hits;
            st.ledger.batches += batches;
            for (i, row) in &fresh {
                if self.cache_enabled {
                    st.cache.insert(keys[*i], row.clone());
                }
            }
        }
        for (i, row) in fresh {
            rows[i] = Some(row);
        }
        // in-request duplicates take the row of their first occurrence
        for i in 0..n {
            if rows[i].is_none() {
                let src = first_of[&keys[i]];
                rows[i] = rows[src].clone();
            }
        }

        let mut probs = Array2::<f32>::zeros((n, k));
        for (i, r) in rows.into_iter().enumerate() {
            let r = r.expect("filled");
            probs.row_mut(i).assign(&ArrayView1::from(&r[..]));
        }
        if self.degrade_to_top1 {
            let hard: Vec<usize> = probs.rows().into_iter().map(argmax).collect();
            return SoftLabelSet::one_hot(&hard, k);
        }
        SoftLabelSet::new(probs)
    }
}

/// Cache key: SHA-256 over the little-endian f32 pixels, the same 32-bit values
/// the wire carries.
pub fn content_key(pixels: &[f32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in pixels {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceTag;
    use ndarray::{array, Array4};
    use std::sync::atomic::{AtomicU64, Ordering};

    /// Probabilities proportional to (1 + mean pixel, 1, 1), counting calls.
    struct Fake {
        calls: AtomicU64,
    }

    impl TeacherBackend for Fake {
        fn info(&self) -> TeacherInfo {
            TeacherInfo { num_classes: 3, input_shape: [2, 2, 1], batch_limit: 2 }
        }
        fn predict_batch(&self, images: &ImageSet) -> Result<Array2<f32>> {
            assert!(images.len() <= 2);
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut out = Array2::zeros((images.len(), 3));
            for i in 0..images.len() {
                let m: f32 = images.pixels(i).iter().sum::<f32>() / 4.0;
                let z = 3.0 + m;
                out.row_mut(i).assign(&array![(1.0 + m) / z, 1.0 / z, 1.0 / z]);
            }
            Ok(out)
        }
    }

    fn images(vals: &[f32]) -> ImageSet {
        let data = Array4::from_shape_fn((vals.len(), 2, 2, 1), |(i, ..)| vals[i]);
        ImageSet::new(data, SourceTag::Original).unwrap()
    }

    #[test]
    fn hard_labels_use_lowest_index_on_ties() {
        let soft = SoftLabelSet::new(array![[0.1, 0.7, 0.2], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(derive_hard_labels(&soft), vec![1, 0, 2]);
        let two = SoftLabelSet::new(array![[0.5, 0.5]]).unwrap();
        assert_eq!(derive_hard_labels(&two), vec![0]);
    }

    #[test]
    fn soft_label_set_validates_simplex() {
        assert!(SoftLabelSet::new(array![[0.6, 0.6]]).is_err());
        assert!(SoftLabelSet::new(array![[1.2, -0.2]]).is_err());
        assert!(SoftLabelSet::new(array![[0.3, 0.7]]).is_ok());
    }

    #[test]
    fn cache_counts_one_dispatch_per_distinct_image() {
        let gw = TeacherGateway::new(Box::new(Fake { calls: AtomicU64::new(0) }));
        let x = images(&[0.5]);
        let a = gw.predict_soft(&x).unwrap();
        let b = gw.predict_soft(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(gw.ledger(), QueryLedger { total_images_sent: 1, cache_hits: 1, batches: 1 });

        // duplicates inside one request are dispatched once, batches respect the limit
        let y = images(&[0.1, 0.2, 0.1, 0.3, 0.5]);
        let p = gw.predict_soft(&y).unwrap();
        assert_eq!(p.probs().row(0), p.probs().row(2));
        let l = gw.ledger();
        assert_eq!(l.total_images_sent, 4);
        assert_eq!(l.cache_hits, 3);
        assert_eq!(l.batches, 3);
    }

    #[test]
    fn cache_can_be_disabled() {
        let gw = TeacherGateway::new(Box::new(Fake { calls: AtomicU64::new(0) })).with_cache(false);
        let x = images(&[0.5, 0.5]);
        gw.predict_soft(&x).unwrap();
        gw.predict_soft(&x).unwrap();
        assert_eq!(gw.ledger().total_images_sent, 4);
        assert_eq!(gw.ledger().cache_hits, 0);
    }

    #[test]
    fn shape_mismatch_is_argument_error() {
        let gw = TeacherGateway::new(Box::new(Fake { calls: AtomicU64::new(0) }));
        let x = ImageSet::new(Array4::zeros((1, 3, 3, 1)), SourceTag::Original).unwrap();
        assert!(matches!(gw.predict_soft(&x), Err(Error::Argument(_))));
    }

    #[test]
    fn degrade_to_top1_one_hot_encodes() {
        let gw = TeacherGateway::new(Box::new(Fake { calls: AtomicU64::new(0) })).with_degrade_to_top1(true);
        let p = gw.predict_soft(&images(&[0.9, 0.0])).unwrap();
        assert_eq!(p.probs(), &array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }
}
