// SPDX-License-Identifier: Apache-2.0

//! NETCONF-lite: XML RPCs over TCP framed by `]]>]]>`.
//!
//! Operations: edit-config (candidate), validate, commit, discard-changes and
//! get-config. Each session opens with a hello carrying
//! [`CAPABILITY`].

pub mod xml;

use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;

pub use xml::{Element, XmlError};

pub const DEFAULT_PORT: u16 = 2830;
pub const EOM: &[u8] = b"]]>]]>";
pub const CAPABILITY: &str = "urn:example:netconf-lite:1.0";
pub const BASE_NS: &str = "urn:ietf:params:xml:ns:netconf:base:1.0";
const MAX_FRAME: usize = 64 << 20;

pub mod error_tag {
    pub const MALFORMED_MESSAGE: &str = "malformed-message";
    pub const OPERATION_FAILED: &str = "operation-failed";
    pub const OPERATION_NOT_SUPPORTED: &str = "operation-not-supported";
}

#[derive(Debug, Error)]
pub enum NetconfError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Xml(#[from] XmlError),
    #[error("rpc-error {tag}: {message}")]
    Rpc { tag: String, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("session closed by peer")]
    Closed,
    #[error("timed out")]
    Timeout,
}

/// Reads frames terminated by `]]>]]>` and writes them back out.
#[derive(Debug)]
pub struct Framed<S> {
    inner: BufReader<S>,
}

impl<S: AsyncRead + AsyncWrite + Unpin> Framed<S> {
    pub fn new(stream: S) -> Self {
        Self { inner: BufReader::new(stream) }
    }

    /// Next frame without the terminator; `None` on clean EOF.
    pub async fn read_frame(&mut self) -> Result<Option<String>, NetconfError> {
        let mut buf = Vec::new();
        loop {
            let n = self.inner.read_until(b'>', &mut buf).await?;
            if n == 0 {
                if buf.iter().all(u8::is_ascii_whitespace) {
                    return Ok(None);
                }
                return Err(NetconfError::Closed);
            }
            if buf.ends_with(EOM) {
                buf.truncate(buf.len() - EOM.len());
                return String::from_utf8(buf)
                    .map(Some)
                    .map_err(|_| NetconfError::Protocol("frame is not UTF-8".into()));
            }
            if buf.len() > MAX_FRAME {
                return Err(NetconfError::Protocol("frame too large".into()));
            }
        }
    }

    pub async fn write_frame(&mut self, body: &str) -> Result<(), NetconfError> {
        let s = self.inner.get_mut();
        s.write_all(body.as_bytes()).await?;
        s.write_all(EOM).await?;
        s.flush().await?;
        Ok(())
    }
}

pub fn hello() -> Element {
    Element::new("hello").attr("xmlns", BASE_NS).child(
        Element::new("capabilities").child(Element::leaf("capability", CAPABILITY)),
    )
}

pub fn hello_has_capability(el: &Element) -> bool {
    el.local_name() == "hello"
        && el
            .find("capabilities")
            .is_some_and(|c| c.find_all("capability").any(|c| c.text.trim() == CAPABILITY))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datastore {
    Candidate,
    Running,
}

impl Datastore {
    fn name(self) -> &'static str {
        match self {
            Datastore::Candidate => "candidate",
            Datastore::Running => "running",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operation {
    /// Merge a `<config>` subtree into the candidate datastore.
    EditConfig(Element),
    Validate,
    Commit,
    DiscardChanges,
    GetConfig(Datastore),
    CloseSession,
}

impl Operation {
    pub fn to_rpc(&self, message_id: u64) -> Element {
        let target = |tag: &str, ds: Datastore| Element::new(tag).child(Element::new(ds.name()));
        let body = match self {
            Operation::EditConfig(cfg) => Element::new("edit-config")
                .child(target("target", Datastore::Candidate))
                .child(cfg.clone()),
            Operation::Validate => {
                Element::new("validate").child(target("source", Datastore::Candidate))
            }
            Operation::Commit => Element::new("commit"),
            Operation::DiscardChanges => Element::new("discard-changes"),
            Operation::GetConfig(ds) => Element::new("get-config").child(target("source", *ds)),
            Operation::CloseSession => Element::new("close-session"),
        };
        Element::new("rpc")
            .attr("message-id", message_id.to_string())
            .attr("xmlns", BASE_NS)
            .child(body)
    }

    /// Decodes an `<rpc>` element into (message-id, operation).
    pub fn from_rpc(rpc: &Element) -> Result<(String, Operation), Reply> {
        let malformed = |m: &str| Reply::error(error_tag::MALFORMED_MESSAGE, m);
        if rpc.local_name() != "rpc" {
            return Err(malformed("expected <rpc>"));
        }
        let id = rpc.get_attr("message-id").unwrap_or_default().to_string();
        let [op] = rpc.children.as_slice() else {
            return Err(malformed("rpc must carry exactly one operation"));
        };
        let source = |op: &Element| -> Result<Datastore, Reply> {
            let s = op.find("source").or_else(|| op.find("target"));
            match s.and_then(|s| s.children.first()).map(Element::local_name) {
                Some("candidate") => Ok(Datastore::Candidate),
                Some("running") => Ok(Datastore::Running),
                _ => Err(malformed("missing or unknown datastore")),
            }
        };
        let parsed = match op.local_name() {
            "edit-config" => {
                if source(op)? != Datastore::Candidate {
                    return Err(Reply::error(
                        error_tag::OPERATION_NOT_SUPPORTED,
                        "edit-config only targets candidate",
                    ));
                }
                let cfg = op.find("config").ok_or_else(|| malformed("edit-config without <config>"))?;
                Operation::EditConfig(cfg.clone())
            }
            "validate" => Operation::Validate,
            "commit" => Operation::Commit,
            "discard-changes" => Operation::DiscardChanges,
            "get-config" => Operation::GetConfig(source(op)?),
            "close-session" => Operation::CloseSession,
            other => {
                return Err(Reply::error(
                    error_tag::OPERATION_NOT_SUPPORTED,
                    &format!("unknown operation {other}"),
                ))
            }
        };
        Ok((id, parsed))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Ok,
    Data(Element),
    Error { tag: String, message: String },
}

impl Reply {
    pub fn error(tag: &str, message: &str) -> Self {
        Reply::Error { tag: tag.into(), message: message.into() }
    }

    pub fn to_element(&self, message_id: Option<&str>) -> Element {
        let mut el = Element::new("rpc-reply");
        if let Some(id) = message_id {
            el = el.attr("message-id", id);
        }
        el = el.attr("xmlns", BASE_NS);
        match self {
            Reply::Ok => el.child(Element::new("ok")),
            Reply::Data(d) => el.child(Element { name: "data".into(), ..d.clone() }),
            Reply::Error { tag, message } => el.child(
                Element::new("rpc-error")
                    .child(Element::leaf("error-tag", tag))
                    .child(Element::leaf("error-message", message)),
            ),
        }
    }

    pub fn from_element(el: &Element) -> Result<Self, NetconfError> {
        if el.local_name() != "rpc-reply" {
            return Err(NetconfError::Protocol(format!("expected rpc-reply, got {}", el.name)));
        }
        if el.find("ok").is_some() {
            return Ok(Reply::Ok);
        }
        if let Some(e) = el.find("rpc-error") {
            return Ok(Reply::Error {
                tag: e.find_text("error-tag").unwrap_or_default().trim().to_string(),
                message: e.find_text("error-message").unwrap_or_default().to_string(),
            });
        }
        if let Some(d) = el.find("data") {
            return Ok(Reply::Data(d.clone()));
        }
        Err(NetconfError::Protocol("empty rpc-reply".into()))
    }
}

/// Client side of one NETCONF-lite session. RPCs are issued one at a time.
#[derive(Debug)]
pub struct NetconfClient {
    conn: Framed<TcpStream>,
    next_id: u64,
    timeout: Duration,
}

impl NetconfClient {
    pub async fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, NetconfError> {
        let stream = tokio::time::timeout(timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| NetconfError::Timeout)??;
        stream.set_nodelay(true)?;
        let mut conn = Framed::new(stream);
        conn.write_frame(&hello().to_xml()).await?;
        let frame = tokio::time::timeout(timeout, conn.read_frame())
            .await
            .map_err(|_| NetconfError::Timeout)??
            .ok_or(NetconfError::Closed)?;
        if !hello_has_capability(&Element::parse(&frame)?) {
            return Err(NetconfError::Protocol(format!("server lacks {CAPABILITY}")));
        }
        Ok(Self { conn, next_id: 1, timeout })
    }

    pub async fn rpc(&mut self, op: &Operation) -> Result<Reply, NetconfError> {
        let id = self.next_id;
        self.next_id += 1;
        self.conn.write_frame(&op.to_rpc(id).to_xml()).await?;
        let frame = tokio::time::timeout(self.timeout, self.conn.read_frame())
            .await
            .map_err(|_| NetconfError::Timeout)??
            .ok_or(NetconfError::Closed)?;
        let el = Element::parse(&frame)?;
        if el.get_attr("message-id").is_some_and(|m| m != id.to_string()) {
            return Err(NetconfError::Protocol("reply message-id mismatch".into()));
        }
        Reply::from_element(&el)
    }

    /// Like [`rpc`](Self::rpc) but maps `rpc-error` replies to `Err`.
    pub async fn call(&mut self, op: &Operation) -> Result<Reply, NetconfError> {
        match self.rpc(op).await? {
            Reply::Error { tag, message } => Err(NetconfError::Rpc { tag, message }),
            r => Ok(r),
        }
    }

    pub async fn edit_config(&mut self, config: Element) -> Result<(), NetconfError> {
        self.call(&Operation::EditConfig(config)).await.map(drop)
    }

    pub async fn validate(&mut self) -> Result<(), NetconfError> {
        self.call(&Operation::Validate).await.map(drop)
    }

    pub async fn commit(&mut self) -> Result<(), NetconfError> {
        self.call(&Operation::Commit).await.map(drop)
    }

    pub async fn discard_changes(&mut self) -> Result<(), NetconfError> {
        self.call(&Operation::DiscardChanges).await.map(drop)
    }

    pub async fn get_config(&mut self, source: Datastore) -> Result<Element, NetconfError> {
        match self.call(&Operation::GetConfig(source)).await? {
            Reply::Data(d) => Ok(d),
            other => Err(NetconfError::Protocol(format!("get-config answered with {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rpc_round_trip() {
        let cfg = Element::new("config").child(Element::leaf("x", 1));
        for op in [
            Operation::EditConfig(cfg),
            Operation::Validate,
            Operation::Commit,
            Operation::DiscardChanges,
            Operation::GetConfig(Datastore::Running),
            Operation::CloseSession,
        ] {
            let el = Element::parse(&op.to_rpc(9).to_xml()).unwrap();
            assert_eq!(Operation::from_rpc(&el).unwrap(), ("9".to_string(), op));
        }
    }

    #[test]
    fn reply_round_trip() {
        for r in [
            Reply::Ok,
            Reply::Data(Element::new("data").child(Element::leaf("a", "b"))),
            Reply::error(error_tag::OPERATION_FAILED, "duplicate evi 3"),
        ] {
            let el = Element::parse(&r.to_element(Some("1")).to_xml()).unwrap();
            assert_eq!(Reply::from_element(&el).unwrap(), r);
        }
    }

    #[test]
    fn unknown_operation_rejected() {
        let el = Element::new("rpc").attr("message-id", "2").child(Element::new("reboot"));
        let err = Operation::from_rpc(&el).unwrap_err();
        assert!(matches!(err, Reply::Error { ref tag, .. } if tag == error_tag::OPERATION_NOT_SUPPORTED));
    }

    #[tokio::test]
    async fn framing_splits_on_terminator() {
        let (a, b) = tokio::io::duplex(1024);
        let mut w = Framed::new(a);
        let mut r = Framed::new(b);
        w.write_frame("<a>x &gt; y</a>").await.unwrap();
        w.write_frame("<b/>").await.unwrap();
        drop(w);
        assert_eq!(r.read_frame().await.unwrap().as_deref(), Some("<a>x &gt; y</a>"));
        assert_eq!(r.read_frame().await.unwrap().as_deref(), Some("<b/>"));
        assert!(r.read_frame().await.unwrap().is_none());
    }
}
