//! Runs a coordinator against data holders living on threads of this process.

use crate::config::OptimizerConfig;
use crate::coordinator::{Coordinator, StudyReport};
use crate::error::{FederationError, Result};
use crate::node::LocalNode;
use crate::transport::{Channel, Mailbox, COORDINATOR};
use std::sync::Arc;
use std::time::Duration;

/// Serves every node on its own thread over `channel`, runs `drive` with a
/// coordinator, then closes the channel. Node failures that are not reported
/// through the channel surface here after `drive` succeeds.
pub fn with_nodes<T>(
    channel: Arc<dyn Channel>,
    nodes: &mut [LocalNode],
    cfg: OptimizerConfig,
    timeout: Duration,
    drive: impl FnOnce(&mut Coordinator) -> Result<T>,
) -> Result<T> {
    let centres: Vec<String> = nodes.iter().map(|n| n.name().to_string()).collect();
    let mut mailboxes =
        centres.iter().map(|c| Mailbox::new(channel.clone(), c)).collect::<std::result::Result<Vec<_>, _>>()?;
    let coordinator = Coordinator::new(Mailbox::new(channel.clone(), COORDINATOR)?, centres, cfg);
    std::thread::scope(|scope| {
        let handles: Vec<_> =
            nodes.iter_mut().zip(mailboxes.iter_mut()).map(|(node, mb)| scope.spawn(move || node.serve(mb))).collect();
        let outcome = coordinator.and_then(|c| {
            let mut c = c.with_timeout(timeout);
            drive(&mut c)
        });
        channel.close();
        let mut node_err = None;
        for h in handles {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => node_err = node_err.or(Some(e)),
                Err(_) => node_err = node_err.or(Some(FederationError::Protocol("a node thread panicked".into()))),
            }
        }
        match (outcome, node_err) {
            (Ok(v), None) => Ok(v),
            (Ok(_), Some(e)) | (Err(e), _) => Err(e),
        }
    })
}

/// Full study: selection, finalisation and performance summaries.
pub fn run_in_process(channel: Arc<dyn Channel>, nodes: &mut [LocalNode], cfg: OptimizerConfig) -> Result<StudyReport> {
    with_nodes(channel, nodes, cfg, Duration::from_secs(24 * 3600), Coordinator::run)
}
