//! Live wire mode: serves one component over HTTP with a real-time clock.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::http::{Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::Value;
use thiserror::Error;
use tokio::sync::oneshot;

use crate::metadata_repo::MetadataRepo;
use crate::tes_layer::{
    Gateway, RoutingPolicy, ServiceInfo, TesCreateRequest, TesError, TesNode, TesService, TesTaskDoc,
};
use crate::types::SiteId;
use crate::wire::{Endpoint, NodeRuntime, RepoEndpoint, TesEndpoint, WireRequest, WireResponse};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("upstream {url}: {message}")]
    Upstream { url: String, message: String },
    #[error("server runtime: {0}")]
    Runtime(String),
}

type Pulse = Box<dyn FnMut(f64) + Send>;

/// A component ready to be served.
pub struct LiveService {
    endpoint: Arc<Mutex<dyn Endpoint>>,
    /// Periodic background work (gateway heartbeats) and its period.
    pulse: Option<(Duration, Pulse)>,
}

impl LiveService {
    pub fn new(endpoint: impl Endpoint + 'static) -> Self {
        LiveService {
            endpoint: Arc::new(Mutex::new(endpoint)),
            pulse: None,
        }
    }

    pub fn node(site: SiteId, known_sites: Vec<SiteId>) -> Self {
        Self::new(TesEndpoint::new(NodeRuntime::new(TesNode::new(site, known_sites))))
    }

    pub fn repo(max_retries: u32) -> Self {
        Self::new(RepoEndpoint::new(MetadataRepo::new(max_retries)))
    }

    /// A gateway over remote services. Every upstream must answer
    /// `service-info` now; afterwards they are polled once per `interval`
    /// and marked down after three missed polls.
    pub fn gateway(name: &str, upstreams: &[String], interval: Duration, policy: RoutingPolicy) -> Result<Self, ServeError> {
        let mut gw = Gateway::new(name, 3.0 * interval.as_secs_f64(), policy);
        let mut probes = Vec::new();
        for url in upstreams {
            let remote = RemoteTes::connect(url)?;
            let id = gw.register(Box::new(remote.clone()), url.clone(), 0.0);
            probes.push((id, remote));
        }
        let gw = Arc::new(Mutex::new(gw));
        let beat = gw.clone();
        let pulse: Pulse = Box::new(move |now| {
            for (id, remote) in &probes {
                if remote.probe() {
                    beat.lock().unwrap().heartbeat(id, now).expect("registered upstream");
                }
            }
            beat.lock().unwrap().refresh(now);
        });
        Ok(LiveService {
            endpoint: Arc::new(Mutex::new(TesEndpoint::new(gw))),
            pulse: Some((interval, pulse)),
        })
    }

    /// A gateway over in-process nodes, one per site.
    pub fn local_gateway(name: &str, sites: &[SiteId], interval: Duration, policy: RoutingPolicy) -> Self {
        let mut gw = Gateway::new(name, 3.0 * interval.as_secs_f64(), policy);
        for s in sites {
            let node = NodeRuntime::new(TesNode::new(s.clone(), sites.to_vec()));
            gw.register(Box::new(node), format!("local://{s}"), 0.0);
        }
        let gw = Arc::new(Mutex::new(gw));
        let beat = gw.clone();
        let ids = sites.to_vec();
        let pulse: Pulse = Box::new(move |now| {
            let mut g = beat.lock().unwrap();
            for id in &ids {
                g.heartbeat(id, now).expect("registered node");
            }
        });
        LiveService {
            endpoint: Arc::new(Mutex::new(TesEndpoint::new(gw))),
            pulse: Some((interval, pulse)),
        }
    }
}

#[derive(Clone)]
struct AppState {
    endpoint: Arc<Mutex<dyn Endpoint>>,
    started: Instant,
}

async fn dispatch(
    axum::extract::State(state): axum::extract::State<AppState>,
    method: Method,
    uri: Uri,
    body: Bytes,
) -> Response {
    let body = if body.is_empty() {
        None
    } else {
        match serde_json::from_slice::<Value>(&body) {
            Ok(v) => Some(v),
            Err(e) => return reply(WireResponse::error(400, format!("body is not JSON: {e}"))),
        }
    };
    let req = WireRequest {
        method: method.as_str().to_string(),
        path: uri.path_and_query().map_or_else(|| uri.path().to_string(), |p| p.as_str().to_string()),
        body,
    };
    let now = state.started.elapsed().as_secs_f64();
    let ep = state.endpoint.clone();
    match tokio::task::spawn_blocking(move || ep.lock().unwrap().handle(&req, now)).await {
        Ok(r) => reply(r),
        Err(e) => reply(WireResponse::error(500, e)),
    }
}

fn reply(r: WireResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, axum::Json(r.body)).into_response()
}

fn start_pulse(pulse: Option<(Duration, Pulse)>, started: Instant, stop: Arc<AtomicBool>) -> Option<JoinHandle<()>> {
    let (every, mut f) = pulse?;
    Some(std::thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            f(started.elapsed().as_secs_f64());
            let mut slept = Duration::ZERO;
            while slept < every && !stop.load(Ordering::Relaxed) {
                let step = Duration::from_millis(20).min(every - slept);
                std::thread::sleep(step);
                slept += step;
            }
        }
    }))
}

fn runtime() -> Result<tokio::runtime::Runtime, ServeError> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| ServeError::Runtime(e.to_string()))
}

async fn bind(addr: &str) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|e| ServeError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })
}

/// A server running on a background thread; stops when dropped.
pub struct LiveServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    pulse: Option<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
}

impl LiveServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for LiveServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for t in [self.thread.take(), self.pulse.take()].into_iter().flatten() {
            let _ = t.join();
        }
    }
}

/// Starts serving on `addr` (use port 0 for an ephemeral port).
pub fn spawn(service: LiveService, addr: &str) -> Result<LiveServer, ServeError> {
    let rt = runtime()?;
    let listener = rt.block_on(bind(addr))?;
    let local = listener.local_addr().map_err(|e| ServeError::Runtime(e.to_string()))?;
    let started = Instant::now();
    let state = AppState {
        endpoint: service.endpoint,
        started,
    };
    let stop = Arc::new(AtomicBool::new(false));
    let pulse = start_pulse(service.pulse, started, stop.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let app = Router::new().fallback(dispatch).with_state(state);
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(LiveServer {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
        pulse,
        stop,
    })
}

/// Serves until interrupted (Ctrl-C or SIGTERM).
pub fn serve(service: LiveService, addr: &str, on_ready: impl FnOnce(SocketAddr)) -> Result<(), ServeError> {
    let server = spawn(service, addr)?;
    on_ready(server.addr());
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| ServeError::Runtime(e.to_string()))?;
    rt.block_on(async {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate()).map_err(|e| ServeError::Runtime(e.to_string()))?;
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        #[cfg(not(unix))]
        let _ = tokio::signal::ctrl_c().await;
        Ok::<(), ServeError>(())
    })?;
    drop(server);
    Ok(())
}

/// Minimal JSON-over-HTTP client for the wire endpoints.
#[derive(Clone)]
pub struct WireClient {
    base: String,
    agent: ureq::Agent,
}

impl WireClient {
    pub fn new(base: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(5)))
            .build()
            .into();
        WireClient {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// Sends one request; `Err` means the server could not be reached.
    pub fn call(&self, req: &WireRequest) -> Result<WireResponse, String> {
        let url = format!("{}{}", self.base, req.path);
        let resp = match (req.method.as_str(), &req.body) {
            ("GET", _) => self.agent.get(&url).call(),
            (_, Some(b)) => self.agent.post(&url).send_json(b),
            (_, None) => self.agent.post(&url).send_empty(),
        };
        let mut resp = resp.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body: Value = resp.body_mut().read_json().unwrap_or(Value::Null);
        Ok(WireResponse { status, body })
    }
}

/// A served TES node or gateway seen as a local [`TesService`].
#[derive(Clone)]
pub struct RemoteTes {
    client: WireClient,
    info: ServiceInfo,
}

impl RemoteTes {
    pub fn connect(url: &str) -> Result<Self, ServeError> {
        let client = WireClient::new(url);
        let upstream = |message: String| ServeError::Upstream {
            url: url.to_string(),
            message,
        };
        let r = client.call(&WireRequest::get("/v1/service-info")).map_err(upstream)?;
        if r.status != 200 {
            return Err(upstream(format!("service-info answered {}", r.status)));
        }
        let info = serde_json::from_value(r.body).map_err(|e| upstream(e.to_string()))?;
        Ok(RemoteTes { client, info })
    }

    fn probe(&self) -> bool {
        matches!(self.client.call(&WireRequest::get("/v1/service-info")), Ok(r) if r.status == 200)
    }

    fn expect<T: for<'de> serde::Deserialize<'de>>(&self, req: WireRequest, what: &str) -> Result<T, TesError> {
        let url = self.client.base();
        let WireResponse { status, body } = self
            .client
            .call(&req)
            .map_err(|e| TesError::NodeUnreachable(format!("{url}: {e}")))?;
        if status == 200 {
            return serde_json::from_value(body).map_err(|e| TesError::NodeUnreachable(format!("bad {what}: {e}")));
        }
        let msg = body["error"].as_str().unwrap_or_default().to_string();
        Err(match status {
            400 => TesError::MalformedSpec(msg),
            404 => TesError::UnknownTask(what.to_string()),
            409 => TesError::AlreadyTerminal(what.to_string()),
            503 => TesError::NoHealthyNode,
            _ => TesError::NodeUnreachable(format!("{url}: {status} {msg}")),
        })
    }
}

impl TesService for RemoteTes {
    fn service_info(&self) -> ServiceInfo {
        self.info.clone()
    }

    fn create_task(&mut self, req: TesCreateRequest, _now: f64) -> Result<String, TesError> {
        let body = serde_json::to_value(req).expect("request serializes");
        let v: Value = self.expect(WireRequest::post("/v1/tasks", body), "task")?;
        v["id"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TesError::NodeUnreachable("create answer without id".into()))
    }

    fn get_task(&mut self, id: &str, _now: f64) -> Result<TesTaskDoc, TesError> {
        self.expect(WireRequest::get(format!("/v1/tasks/{id}")), id)
    }

    fn list_tasks(&mut self, _now: f64) -> Result<Vec<TesTaskDoc>, TesError> {
        let v: Value = self.expect(WireRequest::get("/v1/tasks"), "tasks")?;
        serde_json::from_value(v["tasks"].clone()).map_err(|e| TesError::NodeUnreachable(e.to_string()))
    }

    fn cancel_task(&mut self, id: &str, _now: f64) -> Result<(), TesError> {
        let _: Value = self.expect(WireRequest::post(format!("/v1/tasks/{id}:cancel"), serde_json::json!({})), id)?;
        Ok(())
    }
}
