//! Per-subscription notification delivery.
//!
//! Each subscription owns an unbounded FIFO drained by one worker task, so a
//! slow or dead callback only stalls its own queue. A failed POST (transport
//! error or non-2xx) is retried after a fixed backoff; once the retries are
//! spent the notification is dropped and counted.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use super::Notification;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub enqueued: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Failed attempts that were followed by another try.
    pub retried: u64,
}

impl DeliveryStats {
    pub fn pending(&self) -> u64 {
        self.enqueued.saturating_sub(self.delivered + self.dropped)
    }
}

impl std::ops::Add for DeliveryStats {
    type Output = DeliveryStats;
    fn add(self, o: DeliveryStats) -> DeliveryStats {
        DeliveryStats {
            enqueued: self.enqueued + o.enqueued,
            delivered: self.delivered + o.delivered,
            dropped: self.dropped + o.dropped,
            retried: self.retried + o.retried,
        }
    }
}

#[derive(Debug, Default)]
pub(super) struct SubscriptionCounters {
    pub enqueued: AtomicU64,
    pub delivered: AtomicU64,
    pub dropped: AtomicU64,
    pub retried: AtomicU64,
}

impl SubscriptionCounters {
    pub fn snapshot(&self) -> DeliveryStats {
        // Read the outcome counters first so pending() never goes negative mid-update.
        let delivered = self.delivered.load(Ordering::Acquire);
        let dropped = self.dropped.load(Ordering::Acquire);
        DeliveryStats {
            enqueued: self.enqueued.load(Ordering::Acquire),
            delivered,
            dropped,
            retried: self.retried.load(Ordering::Acquire),
        }
    }
}

pub(super) struct Worker {
    pub http: reqwest::Client,
    pub callback: String,
    pub retry: RetryPolicy,
    pub counters: Arc<SubscriptionCounters>,
}

impl Worker {
    pub fn spawn(self, mut rx: mpsc::UnboundedReceiver<Notification>) {
        tokio::spawn(async move {
            while let Some(n) = rx.recv().await {
                if self.deliver(&n).await {
                    self.counters.delivered.fetch_add(1, Ordering::AcqRel);
                } else {
                    tracing::warn!(sub_id = %n.sub_id, seq = n.seq, callback = %self.callback, "notification dropped");
                    self.counters.dropped.fetch_add(1, Ordering::AcqRel);
                }
            }
        });
    }

    async fn deliver(&self, n: &Notification) -> bool {
        let body = match serde_json::to_vec(n) {
            Ok(b) => b,
            Err(_) => return false,
        };
        for attempt in 0..=self.retry.retries {
            if attempt > 0 {
                self.counters.retried.fetch_add(1, Ordering::AcqRel);
                tokio::time::sleep(self.retry.backoff).await;
            }
            let result = self
                .http
                .post(&self.callback)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone())
                .send()
                .await;
            match result {
                Ok(resp) if resp.status().is_success() => return true,
                Ok(resp) => tracing::debug!(status = %resp.status(), attempt, "callback refused notification"),
                Err(e) => tracing::debug!(error = %e, attempt, "callback unreachable"),
            }
        }
        false
    }
}
