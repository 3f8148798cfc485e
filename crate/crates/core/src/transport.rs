//! Byte-stream transports carrying framed messages.
//!
//! A [`Connection`] is a reader half and a writer half over any byte stream.
//! [`duplex`] builds an in-process pipe pair; [`Connection::tcp`] wraps a
//! socket.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};

use crate::error::{Error, Result};
use crate::wire::{self, Message};

type Closer = Box<dyn Fn() + Send>;

pub struct Connection {
    pub reader: MessageReader,
    pub writer: MessageWriter,
}

impl Connection {
    pub fn new(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        peer: impl Into<String>,
    ) -> Self {
        Self {
            reader: MessageReader {
                inner: Box::new(reader),
                peer: peer.into(),
            },
            writer: MessageWriter {
                inner: Box::new(writer),
                closer: None,
            },
        }
    }

    pub fn tcp(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "tcp".into());
        let reader = stream.try_clone()?;
        let closer = stream.try_clone()?;
        let mut conn = Connection::new(reader, stream, peer);
        conn.writer.closer = Some(Box::new(move || {
            let _ = closer.shutdown(Shutdown::Both);
        }));
        Ok(conn)
    }

    pub fn split(self) -> (MessageReader, MessageWriter) {
        (self.reader, self.writer)
    }
}

/// Receives whole frames from a byte stream.
pub struct MessageReader {
    inner: Box<dyn Read + Send>,
    peer: String,
}

impl MessageReader {
    pub fn peer(&self) -> &str {
        &self.peer
    }

    /// Next message, or `None` if the stream ended cleanly between frames.
    pub fn recv(&mut self) -> Result<Option<Message>> {
        let mut header = [0u8; 4];
        if !read_full(&mut self.inner, &mut header)? {
            return Ok(None);
        }
        let len = wire::frame_len(&header)?.expect("header is complete");
        let mut body = vec![0u8; len];
        if !read_full(&mut self.inner, &mut body)? {
            return Err(Error::protocol(format!(
                "stream from {} ended inside a frame",
                self.peer
            )));
        }
        wire::from_json(&body).map(Some)
    }
}

/// Fills `buf`; false if the stream was already at EOF, error if it ends
/// part-way.
fn read_full(r: &mut dyn Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(Error::protocol("stream ended inside a frame")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Sends whole frames to a byte stream.
pub struct MessageWriter {
    inner: Box<dyn Write + Send>,
    closer: Option<Closer>,
}

impl MessageWriter {
    pub fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = wire::encode(msg)?;
        self.inner.write_all(&frame)?;
        self.inner.flush()?;
        Ok(())
    }

    /// Shuts the underlying stream down in both directions where supported.
    pub fn close(mut self) {
        let _ = self.inner.flush();
        if let Some(c) = self.closer.take() {
            c();
        }
    }
}

/// Two connected in-process endpoints.
pub fn duplex(a_name: &str, b_name: &str) -> (Connection, Connection) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        Connection::new(PipeReader::new(a_rx), PipeWriter(a_tx), b_name),
        Connection::new(PipeReader::new(b_rx), PipeWriter(b_tx), a_name),
    )
}

struct PipeWriter(Sender<Vec<u8>>);

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed the pipe"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

struct PipeReader {
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    offset: usize,
}

impl PipeReader {
    fn new(rx: Receiver<Vec<u8>>) -> Self {
        Self {
            rx,
            pending: Vec::new(),
            offset: 0,
        }
    }
}

impl Read for PipeReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        while self.offset == self.pending.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.offset = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len() - self.offset);
        buf[..n].copy_from_slice(&self.pending[self.offset..self.offset + n]);
        self.offset += n;
        Ok(n)
    }
}
