//! Accepts peer connections and answers their envelopes.

use std::sync::Arc;

use decoy_core::wire::{Envelope, MAX_FRAME_LEN};
use decoy_core::RelayNode;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

/// Serves peers until the listener fails. Each connection may carry any
/// number of request frames; an envelope the node refuses closes it.
pub async fn serve_peers(listener: TcpListener, node: Arc<RelayNode>) {
    loop {
        match listener.accept().await {
            Ok((stream, from)) => {
                let node = node.clone();
                tokio::spawn(async move {
                    if let Err(e) = connection(stream, node).await {
                        log::debug!("peer connection {from}: {e}");
                    }
                });
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                tokio::time::sleep(std::time::Duration::from_millis(50)).await;
            }
        }
    }
}

async fn connection(mut stream: TcpStream, node: Arc<RelayNode>) -> std::io::Result<()> {
    stream.set_nodelay(true).ok();
    loop {
        let len = match stream.read_u32().await {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        if len > MAX_FRAME_LEN {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "frame too large"));
        }
        let mut body = vec![0u8; len];
        stream.read_exact(&mut body).await?;
        let node = node.clone();
        // engine calls and key agreement may block
        let reply = tokio::task::spawn_blocking(move || {
            let env = Envelope::decode_body(&body)?;
            node.handle_envelope(&env)
        })
        .await
        .map_err(std::io::Error::other)?;
        match reply {
            Ok(env) => stream.write_all(&env.encode()).await?,
            Err(e) => {
                log::debug!("dropped envelope: {e}");
                return Ok(());
            }
        }
    }
}
