use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{read_frame, write_frame, Frame, NetError};
use crate::message::{serialize_mbox, Message};

/// Blocking TCP client for the framed protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    /// Frames that arrived while waiting for a specific reply.
    backlog: VecDeque<Frame>,
    realm: String,
    address: String,
}

impl Client {
    /// Connects and greets. Fails with [`NetError::Remote`] if the server refuses.
    pub fn connect(server: impl ToSocketAddrs, world: &str, address: &str, token: Option<&str>) -> Result<Self, NetError> {
        let stream = TcpStream::connect(server)?;
        stream.set_nodelay(true)?;
        let mut c = Client {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            backlog: VecDeque::new(),
            realm: String::new(),
            address: String::new(),
        };
        c.send(&Frame::Hello { world: world.into(), address: address.into(), token: token.map(Into::into) })?;
        match c.read_one(None)? {
            Some(Frame::Welcome { realm, address }) => {
                c.realm = realm;
                c.address = address;
                Ok(c)
            }
            Some(Frame::Error { code, detail }) => Err(NetError::Remote { code, detail }),
            Some(other) => Err(NetError::Unexpected(format!("{other:?}"))),
            None => Err(NetError::Closed),
        }
    }

    pub fn realm(&self) -> &str {
        &self.realm
    }

    /// The session address as canonicalized by the server.
    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), NetError> {
        write_frame(&mut self.writer, frame)
    }

    /// Submits one message and waits for it to be accepted.
    pub fn send_message(&mut self, msg: &Message) -> Result<(), NetError> {
        self.send(&Frame::Send { mbox: serialize_mbox(std::slice::from_ref(msg)) })?;
        self.expect(|f| matches!(f, Frame::Accepted)).map(drop)
    }

    /// Sends `frame` and returns the first reply that `is_reply` accepts, or
    /// the first ERROR. Other frames are kept for [`recv`](Self::recv).
    pub fn request(&mut self, frame: &Frame, is_reply: impl Fn(&Frame) -> bool) -> Result<Frame, NetError> {
        self.send(frame)?;
        self.expect(is_reply)
    }

    fn expect(&mut self, is_reply: impl Fn(&Frame) -> bool) -> Result<Frame, NetError> {
        loop {
            match self.read_one(None)? {
                Some(Frame::Error { code, detail }) => return Err(NetError::Remote { code, detail }),
                Some(f) if is_reply(&f) => return Ok(f),
                Some(f) => self.backlog.push_back(f),
                None => return Err(NetError::Closed),
            }
        }
    }

    /// Next frame, waiting at most `timeout` (forever when `None`).
    /// Returns `Ok(None)` on timeout.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Frame>, NetError> {
        if let Some(f) = self.backlog.pop_front() {
            return Ok(Some(f));
        }
        self.read_one(timeout)
    }

    /// Collects frames until none arrives for `quiet`, or `limit` elapses.
    pub fn drain(&mut self, quiet: Duration, limit: Duration) -> Result<Vec<Frame>, NetError> {
        let deadline = Instant::now() + limit;
        let mut out = Vec::new();
        while let Some(left) = deadline.checked_duration_since(Instant::now()) {
            match self.recv(Some(quiet.min(left).max(Duration::from_millis(1))))? {
                Some(f) => out.push(f),
                None => break,
            }
        }
        Ok(out)
    }

    fn read_one(&mut self, timeout: Option<Duration>) -> Result<Option<Frame>, NetError> {
        // A timeout mid-frame would desynchronize the stream, so only the
        // wait for the first byte is bounded.
        if timeout.is_some() && self.reader.buffer().is_empty() {
            let sock = self.reader.get_ref();
            sock.set_read_timeout(timeout)?;
            let mut probe = [0u8; 1];
            let ready = sock.peek(&mut probe);
            sock.set_read_timeout(None)?;
            match ready {
                Ok(0) => return Err(NetError::Closed),
                Ok(_) => {}
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
        read_frame(&mut self.reader).map(Some)
    }
}
