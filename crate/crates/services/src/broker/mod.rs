//! NGSI-lite context broker.
//!
//! Entities hold attributes stamped with their arrival time. Subscriptions
//! select entities by id glob and, optionally, by attribute name. Every
//! matching upsert enqueues one [`Notification`] carrying only the changed
//! attributes; a per-subscription worker posts them to the callback in order
//! (see [`dispatch`]). Attribute values are stored and forwarded verbatim.

mod dispatch;
mod http;
mod persist;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

pub use dispatch::{DeliveryStats, RetryPolicy};
pub use http::router;

use dispatch::{SubscriptionCounters, Worker};
use persist::{AppendLog, LogRecord};

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("entity {id:?} exists with type {existing:?}")]
    TypeMismatch { id: String, existing: String },
    #[error("invalid callback url: {0}")]
    InvalidCallback(String),
    #[error("entity {0:?} not found")]
    NotFound(String),
    #[error("state log: {0}")]
    Persistence(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub value: serde_json::Value,
    /// Arrival time, milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    pub attrs: BTreeMap<String, AttributeValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: String,
    pub pattern: String,
    #[serde(default)]
    pub attrs: Option<BTreeSet<String>>,
    pub callback: String,
}

impl Subscription {
    fn selects(&self, entity_id: &str, changed: &BTreeMap<String, AttributeValue>) -> Option<BTreeMap<String, AttributeValue>> {
        if !vaultcast_core::glob::matches(&self.pattern, entity_id) {
            return None;
        }
        let attrs: BTreeMap<_, _> = match &self.attrs {
            None => changed.clone(),
            Some(filter) => changed
                .iter()
                .filter(|(k, _)| filter.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        (!attrs.is_empty()).then_some(attrs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    #[serde(rename = "subscriptionId")]
    pub sub_id: String,
    pub seq: u64,
    pub data: Vec<Entity>,
}

/// Outcome of an upsert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpsertAck {
    pub created: bool,
    pub notifications: usize,
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub retry: RetryPolicy,
    pub request_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            request_timeout: Duration::from_secs(5),
        }
    }
}

struct SlotState {
    next_seq: u64,
    queue: mpsc::UnboundedSender<Notification>,
}

struct SubscriptionSlot {
    sub: Subscription,
    state: Mutex<SlotState>,
    counters: Arc<SubscriptionCounters>,
}

pub struct ContextBroker {
    entities: RwLock<HashMap<String, Arc<Mutex<Entity>>>>,
    subscriptions: RwLock<Vec<Arc<SubscriptionSlot>>>,
    log: Option<Mutex<AppendLog>>,
    config: BrokerConfig,
    http: reqwest::Client,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl ContextBroker {
    /// In-memory broker. Must be created inside a Tokio runtime.
    pub fn new(config: BrokerConfig) -> Arc<Self> {
        Arc::new(Self::build(config, None))
    }

    /// Broker backed by an append-log at `path`; existing entities and
    /// subscriptions are replayed before it is returned.
    pub fn open(config: BrokerConfig, path: &Path) -> Result<Arc<Self>, BrokerError> {
        let (log, records) = AppendLog::open(path)?;
        let broker = Self::build(config, Some(Mutex::new(log)));
        for record in records {
            match record {
                LogRecord::Upsert(entity) => {
                    let mut entities = broker.entities.write().unwrap();
                    let slot = entities
                        .entry(entity.id.clone())
                        .or_insert_with(|| Arc::new(Mutex::new(Entity {
                            id: entity.id.clone(),
                            entity_type: entity.entity_type.clone(),
                            attrs: BTreeMap::new(),
                        })));
                    slot.lock().unwrap().attrs.extend(entity.attrs);
                }
                LogRecord::Subscribe(sub) => broker.install(sub),
            }
        }
        Ok(Arc::new(broker))
    }

    fn build(config: BrokerConfig, log: Option<Mutex<AppendLog>>) -> Self {
        let http = reqwest::Client::builder()
            .tcp_nodelay(true)
            .timeout(config.request_timeout)
            .build()
            .expect("http client builds");
        Self {
            entities: RwLock::new(HashMap::new()),
            subscriptions: RwLock::new(Vec::new()),
            log,
            config,
            http,
        }
    }

    fn persist(&self, record: &LogRecord) -> Result<(), BrokerError> {
        if let Some(log) = &self.log {
            log.lock().unwrap().append(record)?;
        }
        Ok(())
    }

    /// Creates or merges an entity and enqueues notifications for every matching subscription.
    pub fn upsert_entity(
        &self,
        id: &str,
        entity_type: &str,
        attrs: BTreeMap<String, serde_json::Value>,
    ) -> Result<UpsertAck, BrokerError> {
        if id.is_empty() || entity_type.is_empty() {
            return Err(BrokerError::Malformed("id and type must be non-empty".into()));
        }
        let timestamp = now_ms();
        let changed: BTreeMap<String, AttributeValue> = attrs
            .into_iter()
            .map(|(k, value)| (k, AttributeValue { value, timestamp }))
            .collect();

        let existing = self.entities.read().unwrap().get(id).cloned();
        let (slot, created) = match existing {
            Some(slot) => (slot, false),
            None => {
                let mut entities = self.entities.write().unwrap();
                let mut created = false;
                let slot = entities
                    .entry(id.to_owned())
                    .or_insert_with(|| {
                        created = true;
                        Arc::new(Mutex::new(Entity {
                            id: id.to_owned(),
                            entity_type: entity_type.to_owned(),
                            attrs: BTreeMap::new(),
                        }))
                    })
                    .clone();
                (slot, created)
            }
        };

        // Holding the entity lock serializes writers to this entity, including
        // the log append and notification order.
        let mut entity = slot.lock().unwrap();
        if entity.entity_type != entity_type {
            return Err(BrokerError::TypeMismatch {
                id: id.to_owned(),
                existing: entity.entity_type.clone(),
            });
        }
        entity.attrs.extend(changed.clone());
        let delta = Entity {
            id: id.to_owned(),
            entity_type: entity_type.to_owned(),
            attrs: changed,
        };
        self.persist(&LogRecord::Upsert(delta.clone()))?;
        tracing::debug!(entity = id, attrs = %serde_json::to_string(&delta.attrs).unwrap_or_default(), "upsert");

        let mut notifications = 0;
        for sub in self.subscriptions.read().unwrap().iter() {
            if let Some(attrs) = sub.sub.selects(id, &delta.attrs) {
                sub.enqueue(Entity {
                    id: id.to_owned(),
                    entity_type: entity_type.to_owned(),
                    attrs,
                });
                notifications += 1;
            }
        }
        Ok(UpsertAck {
            created,
            notifications,
        })
    }

    pub fn query_entity(&self, id: &str) -> Result<Entity, BrokerError> {
        self.entities
            .read()
            .unwrap()
            .get(id)
            .map(|e| e.lock().unwrap().clone())
            .ok_or_else(|| BrokerError::NotFound(id.to_owned()))
    }

    /// Registers a subscription; it applies to every later upsert.
    pub fn create_subscription(
        &self,
        pattern: &str,
        attrs: Option<BTreeSet<String>>,
        callback: &str,
    ) -> Result<String, BrokerError> {
        let url = url::Url::parse(callback).map_err(|e| BrokerError::InvalidCallback(e.to_string()))?;
        if !matches!(url.scheme(), "http" | "https") || url.host().is_none() {
            return Err(BrokerError::InvalidCallback(format!("unsupported callback {callback:?}")));
        }
        if pattern.is_empty() {
            return Err(BrokerError::Malformed("pattern must be non-empty".into()));
        }
        let sub = Subscription {
            sub_id: uuid::Uuid::new_v4().simple().to_string(),
            pattern: pattern.to_owned(),
            attrs,
            callback: callback.to_owned(),
        };
        self.persist(&LogRecord::Subscribe(sub.clone()))?;
        tracing::info!(sub_id = %sub.sub_id, pattern, callback, "subscription created");
        let id = sub.sub_id.clone();
        self.install(sub);
        Ok(id)
    }

    fn install(&self, sub: Subscription) {
        let (tx, rx) = mpsc::unbounded_channel();
        let counters = Arc::new(SubscriptionCounters::default());
        Worker {
            http: self.http.clone(),
            callback: sub.callback.clone(),
            retry: self.config.retry.clone(),
            counters: counters.clone(),
        }
        .spawn(rx);
        self.subscriptions.write().unwrap().push(Arc::new(SubscriptionSlot {
            sub,
            state: Mutex::new(SlotState {
                next_seq: 1,
                queue: tx,
            }),
            counters,
        }));
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.subscriptions
            .read()
            .unwrap()
            .iter()
            .map(|s| s.sub.clone())
            .collect()
    }

    /// Delivery counters summed over all subscriptions.
    pub fn stats(&self) -> DeliveryStats {
        self.subscriptions
            .read()
            .unwrap()
            .iter()
            .map(|s| s.counters.snapshot())
            .fold(DeliveryStats::default(), |a, b| a + b)
    }

    pub fn subscription_stats(&self) -> BTreeMap<String, DeliveryStats> {
        self.subscriptions
            .read()
            .unwrap()
            .iter()
            .map(|s| (s.sub.sub_id.clone(), s.counters.snapshot()))
            .collect()
    }

    /// Waits until every enqueued notification was delivered or dropped.
    pub async fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if self.stats().pending() == 0 {
                return true;
            }
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    /// Everything the broker holds, as JSON.
    pub fn dump_state(&self) -> serde_json::Value {
        let mut entities: Vec<Entity> = self
            .entities
            .read()
            .unwrap()
            .values()
            .map(|e| e.lock().unwrap().clone())
            .collect();
        entities.sort_by(|a, b| a.id.cmp(&b.id));
        serde_json::json!({ "entities": entities, "subscriptions": self.subscriptions() })
    }
}

impl SubscriptionSlot {
    fn enqueue(&self, entity: Entity) {
        let mut state = self.state.lock().unwrap();
        let seq = state.next_seq;
        state.next_seq += 1;
        self.counters.enqueued.fetch_add(1, Ordering::Relaxed);
        let notification = Notification {
            sub_id: self.sub.sub_id.clone(),
            seq,
            data: vec![entity],
        };
        if state.queue.send(notification).is_err() {
            self.counters.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[cfg(test)]
mod tests;
