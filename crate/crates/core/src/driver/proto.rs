//! Wrapper wire protocol: each frame is a 4-byte little-endian length prefix
//! followed by a UTF-8 payload. Requests are `VERB\n<body>` with verbs RUN,
//! RESTART, TYPEOF, SCAN; responses are `OK\n<edge ids comma-separated>\n
//! <error text or empty>` or `TIMEOUT\n`.

use std::io::{Read, Write};

use super::DriverError;

/// Frames larger than this indicate a confused peer, not a real payload.
const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Run(String),
    Restart,
    TypeOf(Vec<String>),
    Scan,
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let payload = match self {
            Request::Run(src) => format!("RUN\n{src}"),
            Request::Restart => "RESTART\n".to_owned(),
            Request::TypeOf(names) => format!("TYPEOF\n{}", names.join("\n")),
            Request::Scan => "SCAN\n".to_owned(),
        };
        payload.into_bytes()
    }

    pub fn decode(payload: &[u8]) -> Result<Request, DriverError> {
        let text = std::str::from_utf8(payload)
            .map_err(|_| DriverError::Protocol("request is not UTF-8".into()))?;
        let (verb, body) = text.split_once('\n').unwrap_or((text, ""));
        match verb {
            "RUN" => Ok(Request::Run(body.to_owned())),
            "RESTART" => Ok(Request::Restart),
            "TYPEOF" => Ok(Request::TypeOf(
                body.lines().map(str::to_owned).collect(),
            )),
            "SCAN" => Ok(Request::Scan),
            other => Err(DriverError::Protocol(format!("unknown verb {other:?}"))),
        }
    }
}

/// Decoded response frame. For RUN, `payload` carries the error text (empty
/// when the line succeeded); for TYPEOF and SCAN it carries the query result.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Response {
    pub timed_out: bool,
    pub edge_ids: Vec<u32>,
    pub payload: String,
}

impl Response {
    pub fn timeout() -> Self {
        Response {
            timed_out: true,
            ..Response::default()
        }
    }

    pub fn ok(edge_ids: Vec<u32>, payload: impl Into<String>) -> Self {
        Response {
            timed_out: false,
            edge_ids,
            payload: payload.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        if self.timed_out {
            return b"TIMEOUT\n".to_vec();
        }
        let ids = self
            .edge_ids
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!("OK\n{ids}\n{}", self.payload).into_bytes()
    }

    pub fn decode(payload: &[u8]) -> Result<Response, DriverError> {
        let text = std::str::from_utf8(payload)
            .map_err(|_| DriverError::Protocol("response is not UTF-8".into()))?;
        if text == "TIMEOUT\n" || text == "TIMEOUT" {
            return Ok(Response::timeout());
        }
        let rest = text
            .strip_prefix("OK\n")
            .ok_or_else(|| DriverError::Protocol("response missing OK header".into()))?;
        let (ids_line, payload) = rest.split_once('\n').unwrap_or((rest, ""));
        let mut edge_ids = Vec::new();
        for part in ids_line.split(',') {
            if part.is_empty() {
                continue;
            }
            edge_ids.push(
                part.parse()
                    .map_err(|_| DriverError::Protocol(format!("bad edge id {part:?}")))?,
            );
        }
        Ok(Response {
            timed_out: false,
            edge_ids,
            payload: payload.to_owned(),
        })
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    let len = payload.len() as u32;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes);
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_length_prefixed_le() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"RUN\nx = 1").unwrap();
        assert_eq!(&buf[..4], &9u32.to_le_bytes());
        assert_eq!(&buf[4..], b"RUN\nx = 1");
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cursor).unwrap(), b"RUN\nx = 1");
    }

    #[test]
    fn request_round_trip() {
        for req in [
            Request::Run("a = 1\nb = 2".into()),
            Request::Restart,
            Request::TypeOf(vec!["a".into(), "b".into()]),
            Request::Scan,
        ] {
            assert_eq!(Request::decode(&req.encode()).unwrap(), req);
        }
    }

    #[test]
    fn response_round_trip_and_exact_bytes() {
        let ok = Response::ok(vec![1, 7, 42], "boom");
        assert_eq!(ok.encode(), b"OK\n1,7,42\nboom");
        assert_eq!(Response::decode(&ok.encode()).unwrap(), ok);

        let clean = Response::ok(vec![], "");
        assert_eq!(clean.encode(), b"OK\n\n");
        assert_eq!(Response::decode(&clean.encode()).unwrap(), clean);

        let t = Response::timeout();
        assert_eq!(t.encode(), b"TIMEOUT\n");
        assert_eq!(Response::decode(&t.encode()).unwrap(), t);
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME + 1).to_le_bytes());
        let mut cursor = std::io::Cursor::new(buf);
        assert!(read_frame(&mut cursor).is_err());
    }
}
