//! Transparent TCP relay that records every byte it forwards.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

/// Bytes seen on one relayed connection.
#[derive(Debug, Clone, Default)]
pub struct ConnectionCapture {
    pub to_server: Vec<u8>,
    pub to_client: Vec<u8>,
}

type Shared = Arc<Mutex<Vec<Arc<Mutex<ConnectionCapture>>>>>;

pub struct WireTap {
    pub name: String,
    pub addr: SocketAddr,
    captures: Shared,
    task: JoinHandle<()>,
}

impl WireTap {
    /// Listens on `listen` and relays each connection to `target`.
    pub async fn start(name: &str, listen: &str, target: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(listen).await?;
        let addr = listener.local_addr()?;
        let captures: Shared = Arc::default();
        let shared = captures.clone();
        let task = tokio::spawn(async move {
            while let Ok((client, _)) = listener.accept().await {
                let capture = Arc::new(Mutex::new(ConnectionCapture::default()));
                shared.lock().unwrap().push(capture.clone());
                tokio::spawn(async move {
                    let Ok(server) = TcpStream::connect(target).await else {
                        return;
                    };
                    let _ = client.set_nodelay(true);
                    let _ = server.set_nodelay(true);
                    let (cr, cw) = client.into_split();
                    let (sr, sw) = server.into_split();
                    let up = relay(cr, sw, capture.clone(), true);
                    let down = relay(sr, cw, capture, false);
                    let _ = tokio::join!(up, down);
                });
            }
        });
        Ok(Self {
            name: name.to_owned(),
            addr,
            captures,
            task,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn captures(&self) -> Vec<ConnectionCapture> {
        self.captures
            .lock()
            .unwrap()
            .iter()
            .map(|c| c.lock().unwrap().clone())
            .collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.captures()
            .iter()
            .map(|c| c.to_server.len() + c.to_client.len())
            .sum()
    }

    pub fn stop(self) -> Vec<ConnectionCapture> {
        self.task.abort();
        self.captures()
    }
}

async fn relay(
    mut from: OwnedReadHalf,
    mut to: OwnedWriteHalf,
    capture: Arc<Mutex<ConnectionCapture>>,
    upstream: bool,
) -> std::io::Result<()> {
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        let n = from.read(&mut buf).await?;
        if n == 0 {
            return to.shutdown().await;
        }
        {
            let mut c = capture.lock().unwrap();
            let dir = if upstream { &mut c.to_server } else { &mut c.to_client };
            dir.extend_from_slice(&buf[..n]);
        }
        to.write_all(&buf[..n]).await?;
    }
}

/// Counts occurrences of `needle` in every captured stream.
pub fn count_occurrences(captures: &[ConnectionCapture], needle: &[u8]) -> usize {
    captures
        .iter()
        .flat_map(|c| [&c.to_server, &c.to_client])
        .map(|stream| occurrences(stream, needle))
        .sum()
}

pub fn occurrences(haystack: &[u8], needle: &[u8]) -> usize {
    if needle.is_empty() || haystack.len() < needle.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}
