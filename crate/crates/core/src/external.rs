//! Out-of-process noise predictors over a length-prefixed binary protocol.
//!
//! Every message is a little-endian `u32` byte count followed by the body.
//!
//! Request body:
//! `b"ADPR"`, `u8` version (1), `u32` step `t`, `u32` frames `L`, `u32` bins `K`,
//! then `L·K` `f32` real parts and `L·K` `f32` imaginary parts, frame-major.
//!
//! Response body:
//! `b"ADPE"`, `u32 L`, `u32 K`, then the two `f32` planes in the same order.
//!
//! A server answers each request with exactly one response and exits on EOF.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use ndarray::Array3;
use num_complex::Complex64;

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::spectral::{ComplexSpectrogram, Domain};

pub const REQUEST_MAGIC: [u8; 4] = *b"ADPR";
pub const RESPONSE_MAGIC: [u8; 4] = *b"ADPE";
pub const PROTOCOL_VERSION: u8 = 1;

const REQUEST_HEADER: usize = 17;
const RESPONSE_HEADER: usize = 12;
/// Upper bound on a single message, guarding against garbage length prefixes.
const MAX_MESSAGE: usize = 1 << 30;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

fn protocol(offset: usize, message: impl Into<String>) -> Error {
    Error::Protocol {
        offset,
        message: message.into(),
    }
}

fn put_planes(out: &mut Vec<u8>, x: &ComplexSpectrogram) {
    let d = x.data();
    for v in d.iter() {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
    }
    for v in d.iter() {
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
}

fn read_u32(body: &[u8], offset: usize) -> Result<u32> {
    body.get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| protocol(offset, "truncated header"))
}

fn get_planes(
    body: &[u8],
    offset: usize,
    frames: usize,
    bins: usize,
) -> Result<ComplexSpectrogram> {
    let n = frames * bins;
    let expected = offset + 8 * n;
    if body.len() != expected {
        return Err(protocol(
            body.len().min(expected),
            format!(
                "payload holds {} bytes, expected {}",
                body.len() - offset.min(body.len()),
                8 * n
            ),
        ));
    }
    let f = |i: usize| {
        let at = offset + 4 * i;
        f32::from_le_bytes(body[at..at + 4].try_into().expect("four bytes")) as f64
    };
    let data = Array3::from_shape_fn((frames, bins, 1), |(l, k, _)| {
        let i = l * bins + k;
        Complex64::new(f(i), f(n + i))
    });
    if let Some(pos) = data
        .iter()
        .position(|v| !v.re.is_finite() || !v.im.is_finite())
    {
        return Err(protocol(offset + 4 * pos, "non-finite sample in payload"));
    }
    Ok(ComplexSpectrogram::from_array(data, Domain::Compressive))
}

fn dims(x: &ComplexSpectrogram) -> Result<(u32, u32)> {
    x.ensure_single_channel("denoiser state")?;
    let l = u32::try_from(x.n_frames()).map_err(|_| Error::External("too many frames".into()))?;
    let k = u32::try_from(x.n_bins()).map_err(|_| Error::External("too many bins".into()))?;
    Ok((l, k))
}

pub fn encode_request(x_t: &ComplexSpectrogram, t: u32) -> Result<Vec<u8>> {
    let (l, k) = dims(x_t)?;
    let mut out = Vec::with_capacity(REQUEST_HEADER + 8 * x_t.data().len());
    out.extend_from_slice(&REQUEST_MAGIC);
    out.push(PROTOCOL_VERSION);
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&l.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    put_planes(&mut out, x_t);
    Ok(out)
}

/// Parses a request body into `(t, x_t)`.
pub fn decode_request(body: &[u8]) -> Result<(u32, ComplexSpectrogram)> {
    if body.get(..4) != Some(&REQUEST_MAGIC[..]) {
        return Err(protocol(0, "bad request magic"));
    }
    match body.get(4) {
        Some(&PROTOCOL_VERSION) => {}
        Some(v) => return Err(protocol(4, format!("unsupported version {v}"))),
        None => return Err(protocol(4, "truncated header")),
    }
    let t = read_u32(body, 5)?;
    let l = read_u32(body, 9)? as usize;
    let k = read_u32(body, 13)? as usize;
    if l == 0 || k == 0 {
        return Err(protocol(9, format!("empty shape {l}x{k}")));
    }
    Ok((t, get_planes(body, REQUEST_HEADER, l, k)?))
}

pub fn encode_response(eps: &ComplexSpectrogram) -> Result<Vec<u8>> {
    let (l, k) = dims(eps)?;
    let mut out = Vec::with_capacity(RESPONSE_HEADER + 8 * eps.data().len());
    out.extend_from_slice(&RESPONSE_MAGIC);
    out.extend_from_slice(&l.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    put_planes(&mut out, eps);
    Ok(out)
}

/// Parses a response body and checks it matches the requested `(L, K)`.
pub fn decode_response(body: &[u8], frames: usize, bins: usize) -> Result<ComplexSpectrogram> {
    if body.get(..4) != Some(&RESPONSE_MAGIC[..]) {
        return Err(protocol(0, "bad response magic"));
    }
    let l = read_u32(body, 4)? as usize;
    if l != frames {
        return Err(protocol(
            4,
            format!("response has {l} frames, expected {frames}"),
        ));
    }
    let k = read_u32(body, 8)? as usize;
    if k != bins {
        return Err(protocol(
            8,
            format!("response has {k} bins, expected {bins}"),
        ));
    }
    get_planes(body, RESPONSE_HEADER, l, k)
}

pub fn write_message<W: Write>(w: &mut W, body: &[u8]) -> Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| Error::External("message too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one length-prefixed message; `Ok(None)` on a clean EOF before the prefix.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(protocol(got, "stream ended inside length prefix")),
            n => got += n,
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if len > MAX_MESSAGE {
        return Err(protocol(0, format!("message length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => protocol(4, "stream ended inside message body"),
        _ => Error::Io(e),
    })?;
    Ok(Some(body))
}

/// Answers requests from `reader` with `denoiser` until EOF.
pub fn serve<D: Denoiser + ?Sized, R: Read, W: Write>(
    denoiser: &mut D,
    reader: R,
    writer: W,
) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    while let Some(body) = read_message(&mut reader)? {
        let (t, x_t) = decode_request(&body)?;
        let eps = denoiser.predict_noise(&x_t, t as usize)?;
        write_message(&mut writer, &encode_response(&eps)?)?;
    }
    Ok(())
}

/// Where an [`ExternalDenoiser`] lives: `host:port` connects over TCP,
/// anything else is run with `sh -c` and spoken to over its stdin/stdout.
pub fn parse_endpoint(spec: &str) -> Endpoint {
    match spec.parse::<SocketAddr>() {
        Ok(addr) => Endpoint::Tcp(addr),
        Err(_) => Endpoint::Command(spec.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Command(String),
    Tcp(SocketAddr),
}

type Inbox = Receiver<Result<Vec<u8>>>;

/// Noise predictor served by another process. Its Jacobian is unavailable,
/// so guidance falls back to the Tweedie surrogate.
pub struct ExternalDenoiser {
    writer: Box<dyn Write + Send>,
    inbox: Inbox,
    child: Option<Child>,
    socket: Option<TcpStream>,
    timeout: Duration,
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> Inbox {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let msg = match read_message(&mut reader) {
                Ok(Some(body)) => Ok(body),
                Ok(None) => Err(Error::External("denoiser closed the connection".into())),
                Err(e) => Err(e),
            };
            let stop = msg.is_err();
            if tx.send(msg).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl ExternalDenoiser {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect_timeout(addr, timeout)
                    .map_err(|e| Error::External(format!("cannot connect to {addr}: {e}")))?;
                stream.set_nodelay(true)?;
                let read_half = stream.try_clone()?;
                let stream_handle = stream.try_clone()?;
                Ok(Self {
                    writer: Box::new(BufWriter::new(stream)),
                    inbox: spawn_reader(read_half),
                    child: None,
                    socket: Some(stream_handle),
                    timeout,
                })
            }
            Endpoint::Command(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::External(format!("cannot start `{cmd}`: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self {
                    writer: Box::new(BufWriter::new(stdin)),
                    inbox: spawn_reader(stdout),
                    child: Some(child),
                    socket: None,
                    timeout,
                })
            }
        }
    }
}

impl Denoiser for ExternalDenoiser {
    fn predict_noise(&mut self, x_t: &ComplexSpectrogram, t: usize) -> Result<ComplexSpectrogram> {
        let step =
            u32::try_from(t).map_err(|_| Error::External(format!("step {t} out of range")))?;
        let request = encode_request(x_t, step)?;
        write_message(&mut self.writer, &request)
            .map_err(|e| Error::External(format!("sending request for step {t}: {e}")))?;
        let body = match self.inbox.recv_timeout(self.timeout) {
            Ok(msg) => msg?,
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::External(format!(
                    "no response for step {t} within {:.1} s",
                    self.timeout.as_secs_f64()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::External("denoiser connection lost".into()))
            }
        };
        let eps = decode_response(&body, x_t.n_frames(), x_t.n_bins())?;
        Ok(ComplexSpectrogram::from_parts(eps.into_data(), x_t))
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        if let Some(socket) = self.socket.take() {
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
