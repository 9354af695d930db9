//! Reverse geocoding against a Nominatim-compatible endpoint, with a
//! persistent JSON-lines cache and a 1 request/second limiter.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const GEOCODER_URL_ENV: &str = "GEOCLAP_GEOCODER_URL";
pub const DEFAULT_USER_AGENT: &str = concat!("geoclap/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum GeocodeError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("geocoder unavailable after {attempts} attempts: {last}")]
    GeocodeUnavailable { attempts: u32, last: String },
    #[error("geocoder returned no address: {0}")]
    NoAddress(String),
    #[error("geocoder base url not configured (set {GEOCODER_URL_ENV})")]
    NotConfigured,
    #[error("geocode cache: {0}")]
    Cache(String),
}

/// One cached lookup. `fetched_at` is unix seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeocodeCacheEntry {
    pub lat: f64,
    pub lon: f64,
    pub address: String,
    pub fetched_at: u64,
}

/// Coordinates rounded to 1e-6 degrees.
pub type CacheKey = (i64, i64);

pub fn cache_key(lat: f64, lon: f64) -> CacheKey {
    ((lat * 1e6).round() as i64, (lon * 1e6).round() as i64)
}

#[derive(Debug, Clone)]
pub struct GeocodeConfig {
    pub base_url: Option<String>,
    pub user_agent: String,
    pub min_interval: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub request_timeout: Duration,
}

impl Default for GeocodeConfig {
    fn default() -> Self {
        Self {
            base_url: std::env::var(GEOCODER_URL_ENV).ok().filter(|s| !s.is_empty()),
            user_agent: DEFAULT_USER_AGENT.to_string(),
            min_interval: Duration::from_secs(1),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            request_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Deserialize)]
struct ReverseResponse {
    display_name: Option<String>,
    error: Option<String>,
}

/// Cache reads take a shared lock; network access is serialized behind the
/// limiter, and the cache is re-checked once the limiter is held so
/// concurrent callers for one key cause a single request.
pub struct GeocodeClient {
    config: GeocodeConfig,
    http: reqwest::blocking::Client,
    cache: RwLock<HashMap<CacheKey, GeocodeCacheEntry>>,
    cache_path: Option<PathBuf>,
    limiter: Mutex<Option<Instant>>,
    network_calls: AtomicUsize,
}

impl GeocodeClient {
    pub fn new(config: GeocodeConfig, cache_path: Option<&Path>) -> Result<Self, GeocodeError> {
        let http = reqwest::blocking::Client::builder()
            .user_agent(config.user_agent.clone())
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GeocodeError::Cache(format!("http client: {e}")))?;
        let cache = match cache_path {
            Some(p) if p.exists() => read_cache(p)?,
            _ => HashMap::new(),
        };
        Ok(Self {
            config,
            http,
            cache: RwLock::new(cache),
            cache_path: cache_path.map(Path::to_path_buf),
            limiter: Mutex::new(None),
            network_calls: AtomicUsize::new(0),
        })
    }

    /// HTTP requests issued so far (each retry counts).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn cached(&self, lat: f64, lon: f64) -> Option<String> {
        let cache = self.cache.read().unwrap_or_else(|e| e.into_inner());
        cache.get(&cache_key(lat, lon)).map(|e| e.address.clone())
    }

    pub fn reverse_geocode(&self, lat: f64, lon: f64) -> Result<String, GeocodeError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeocodeError::InvalidCoordinate { lat, lon });
        }
        if let Some(a) = self.cached(lat, lon) {
            return Ok(a);
        }
        let base = self.config.base_url.as_deref().ok_or(GeocodeError::NotConfigured)?;
        let mut last_request = self.limiter.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(a) = self.cached(lat, lon) {
            return Ok(a);
        }
        let url = format!("{}/reverse", base.trim_end_matches('/'));
        let attempts = 1 + self.config.max_retries;
        let mut last_err = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff_base * 2u32.pow(attempt - 1));
            }
            if let Some(t) = *last_request {
                let since = t.elapsed();
                if since < self.config.min_interval {
                    std::thread::sleep(self.config.min_interval - since);
                }
            }
            *last_request = Some(Instant::now());
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.fetch(&url, lat, lon) {
                Ok(Ok(address)) => {
                    self.insert(GeocodeCacheEntry {
                        lat,
                        lon,
                        address: address.clone(),
                        fetched_at: unix_now(),
                    })?;
                    return Ok(address);
                }
                Ok(Err(msg)) => return Err(GeocodeError::NoAddress(msg)),
                Err(e) => {
                    log::warn!("geocode attempt {} for ({lat}, {lon}) failed: {e}", attempt + 1);
                    last_err = e;
                }
            }
        }
        Err(GeocodeError::GeocodeUnavailable {
            attempts,
            last: last_err,
        })
    }

    /// Outer error: retryable transport or status failure. Inner error: a
    /// well-formed response that carries no address.
    fn fetch(&self, url: &str, lat: f64, lon: f64) -> Result<Result<String, String>, String> {
        let resp = self
            .http
            .get(url)
            .query(&[
                ("lat", format!("{lat}")),
                ("lon", format!("{lon}")),
                ("format", "jsonv2".to_string()),
            ])
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let body: ReverseResponse = resp.json().map_err(|e| e.to_string())?;
        Ok(match body.display_name {
            Some(a) if !a.trim().is_empty() => Ok(a),
            _ => Err(body.error.unwrap_or_else(|| "missing display_name".into())),
        })
    }

    fn insert(&self, entry: GeocodeCacheEntry) -> Result<(), GeocodeError> {
        let mut cache = self.cache.write().unwrap_or_else(|e| e.into_inner());
        if let Some(path) = &self.cache_path {
            append_cache(path, &entry)?;
        }
        cache.insert(cache_key(entry.lat, entry.lon), entry);
        Ok(())
    }

    /// Seeds the cache (and its file) without a network call.
    pub fn preload(&self, entry: GeocodeCacheEntry) -> Result<(), GeocodeError> {
        self.insert(entry)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Later lines win for duplicate keys.
pub fn read_cache(path: &Path) -> Result<HashMap<CacheKey, GeocodeCacheEntry>, GeocodeError> {
    let file = File::open(path).map_err(|e| GeocodeError::Cache(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GeocodeError::Cache(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: GeocodeCacheEntry = serde_json::from_str(&line)
            .map_err(|e| GeocodeError::Cache(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(cache_key(e.lat, e.lon), e);
    }
    Ok(out)
}

fn append_cache(path: &Path, entry: &GeocodeCacheEntry) -> Result<(), GeocodeError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GeocodeError::Cache(format!("{}: {e}", path.display())))?;
    let line = serde_json::to_string(entry).map_err(|e| GeocodeError::Cache(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| GeocodeError::Cache(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::Arc;

    const POTSDAMER: &str = "Potsdamer Platz, Tiergarten, Mitte, Berlin, 10785, Germany";

    fn fast_config(base: Option<String>) -> GeocodeConfig {
        GeocodeConfig {
            base_url: base,
            min_interval: Duration::from_millis(5),
            backoff_base: Duration::from_millis(1),
            request_timeout: Duration::from_secs(2),
            ..GeocodeConfig::default()
        }
    }

    /// Serves `status`/`body` to every connection and counts requests.
    fn mock_server(status: u16, body: &'static str) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (h, s) = (hits.clone(), seen.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut buf = [0u8; 4096];
                let n = stream.read(&mut buf).unwrap_or(0);
                s.lock().unwrap().push(String::from_utf8_lossy(&buf[..n]).into_owned());
                h.fetch_add(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        (format!("http://{addr}"), hits, seen)
    }

    #[test]
    fn cached_entry_needs_no_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let entry = GeocodeCacheEntry {
            lat: 52.509663,
            lon: 13.376481,
            address: POTSDAMER.into(),
            fetched_at: 0,
        };
        std::fs::write(&path, serde_json::to_string(&entry).unwrap() + "\n").unwrap();
        // no base url: any network attempt would be NotConfigured
        let client = GeocodeClient::new(fast_config(None), Some(&path)).unwrap();
        assert_eq!(client.reverse_geocode(52.509663, 13.376481).unwrap(), POTSDAMER);
        assert_eq!(client.network_calls(), 0);
    }

    #[test]
    fn invalid_coordinates() {
        let client = GeocodeClient::new(fast_config(None), None).unwrap();
        assert!(matches!(
            client.reverse_geocode(91.0, 0.0),
            Err(GeocodeError::InvalidCoordinate { .. })
        ));
        assert!(matches!(
            client.reverse_geocode(0.0, -180.5),
            Err(GeocodeError::InvalidCoordinate { .. })
        ));
    }

    #[test]
    fn miss_fetches_once_and_persists() {
        let (url, hits, seen) = mock_server(200, r#"{"display_name":"Somewhere, Earth"}"#);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let client = GeocodeClient::new(fast_config(Some(url)), Some(&path)).unwrap();
        assert_eq!(client.reverse_geocode(10.0, 20.0).unwrap(), "Somewhere, Earth");
        // same key after rounding
        assert_eq!(client.reverse_geocode(10.0000001, 20.0).unwrap(), "Somewhere, Earth");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        let req = seen.lock().unwrap()[0].clone();
        assert!(req.starts_with("GET /reverse?"));
        assert!(req.contains("format=jsonv2"));
        assert!(req.to_lowercase().contains("user-agent: geoclap/"));

        let reloaded = GeocodeClient::new(fast_config(None), Some(&path)).unwrap();
        assert_eq!(reloaded.cached(10.0, 20.0).as_deref(), Some("Somewhere, Earth"));
    }

    #[test]
    fn concurrent_identical_keys_fetch_once() {
        let (url, hits, _) = mock_server(200, r#"{"display_name":"Shared"}"#);
        let client = Arc::new(GeocodeClient::new(fast_config(Some(url)), None).unwrap());
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let c = client.clone();
                std::thread::spawn(move || c.reverse_geocode(-33.5, 151.25).unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), "Shared");
        }
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn server_error_exhausts_retries() {
        let (url, hits, _) = mock_server(503, "{}");
        let client = GeocodeClient::new(fast_config(Some(url)), None).unwrap();
        match client.reverse_geocode(1.0, 2.0) {
            Err(GeocodeError::GeocodeUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("{other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 4);
        assert_eq!(client.cached(1.0, 2.0), None);
    }

    #[test]
    fn endpoint_down_is_unavailable() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let client = GeocodeClient::new(fast_config(Some(format!("http://127.0.0.1:{port}"))), None).unwrap();
        assert!(matches!(
            client.reverse_geocode(1.0, 2.0),
            Err(GeocodeError::GeocodeUnavailable { attempts: 4, .. })
        ));
        assert_eq!(client.network_calls(), 4);
    }

    #[test]
    fn rate_limit_spaces_requests() {
        let (url, hits, _) = mock_server(200, r#"{"display_name":"A"}"#);
        let mut cfg = fast_config(Some(url));
        cfg.min_interval = Duration::from_millis(150);
        let client = GeocodeClient::new(cfg, None).unwrap();
        let t0 = Instant::now();
        for i in 0..3 {
            client.reverse_geocode(i as f64, 0.0).unwrap();
        }
        assert!(t0.elapsed() >= Duration::from_millis(300));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn error_body_is_no_address() {
        let (url, hits, _) = mock_server(200, r#"{"error":"Unable to geocode"}"#);
        let client = GeocodeClient::new(fast_config(Some(url)), None).unwrap();
        assert!(matches!(client.reverse_geocode(0.0, 0.0), Err(GeocodeError::NoAddress(_))));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }
}
