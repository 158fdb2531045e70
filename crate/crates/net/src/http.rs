//! Just enough HTTP/1.1 framing for one request and one response per
//! connection.

use std::io::{self, Read, Write};

use en_core::transport::{Method, Request, Response, Status};

pub const MAX_BODY: usize = 4 << 20;
const MAX_HEADERS: usize = 32;

/// Reads until the header block is complete, then the declared body.
fn read_message<R: Read>(reader: &mut R, parse: impl Fn(&[u8]) -> Result<Option<(usize, usize)>, String>) -> io::Result<(Vec<u8>, usize)> {
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 4096];
    loop {
        if let Some((head, body_len)) = parse(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))? {
            if body_len > MAX_BODY {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "body too large"));
            }
            while buf.len() < head + body_len {
                let n = reader.read(&mut chunk)?;
                if n == 0 {
                    return Err(io::ErrorKind::UnexpectedEof.into());
                }
                buf.extend_from_slice(&chunk[..n]);
            }
            buf.truncate(head + body_len);
            return Ok((buf, head));
        }
        if buf.len() > 64 * 1024 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "header block too large"));
        }
        let n = reader.read(&mut chunk)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

fn content_length(headers: &[httparse::Header<'_>]) -> Result<usize, String> {
    match headers.iter().find(|h| h.name.eq_ignore_ascii_case("content-length")) {
        None => Ok(0),
        Some(h) => std::str::from_utf8(h.value)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| "bad content-length".to_owned()),
    }
}

pub fn read_request<R: Read>(reader: &mut R) -> io::Result<Request> {
    let (buf, head) = read_message(reader, |buf| {
        let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut req = httparse::Request::new(&mut headers);
        match req.parse(buf).map_err(|e| e.to_string())? {
            httparse::Status::Partial => Ok(None),
            httparse::Status::Complete(head) => Ok(Some((head, content_length(req.headers)?))),
        }
    })?;
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut headers);
    req.parse(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let method = match req.method {
        Some("GET") => Method::Get,
        Some("POST") => Method::Post,
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported method {other:?}"),
            ))
        }
    };
    let path = req.path.unwrap_or("/").to_owned();
    Ok(Request {
        method,
        path,
        identity: None,
        body: buf[head..].to_vec(),
    })
}

pub fn write_request<W: Write>(writer: &mut W, host: &str, request: &Request) -> io::Result<()> {
    let method = match request.method {
        Method::Get => "GET",
        Method::Post => "POST",
    };
    let mut out = format!(
        "{method} {} HTTP/1.1\r\nHost: {host}\r\nContent-Length: {}\r\nConnection: close\r\n",
        request.path,
        request.body.len()
    );
    if request.method == Method::Post {
        out.push_str("Content-Type: application/octet-stream\r\n");
    }
    out.push_str("\r\n");
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&request.body);
    writer.write_all(&bytes)?;
    writer.flush()
}

pub fn read_response<R: Read>(reader: &mut R) -> io::Result<Response> {
    let (buf, head) = read_message(reader, |buf| {
        let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut resp = httparse::Response::new(&mut headers);
        match resp.parse(buf).map_err(|e| e.to_string())? {
            httparse::Status::Partial => Ok(None),
            httparse::Status::Complete(head) => Ok(Some((head, content_length(resp.headers)?))),
        }
    })?;
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut headers);
    resp.parse(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let code = resp.code.unwrap_or(0);
    let status = Status::from_code(code)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("unexpected status {code}")))?;
    Ok(Response::new(status, buf[head..].to_vec()))
}

pub fn write_response<W: Write>(writer: &mut W, response: &Response) -> io::Result<()> {
    let mut bytes = format!(
        "HTTP/1.1 {} {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        response.status.code(),
        response.status.reason(),
        response.body.len()
    )
    .into_bytes();
    bytes.extend_from_slice(&response.body);
    writer.write_all(&bytes)?;
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let mut wire = Vec::new();
        write_request(&mut wire, "it.example:443", &Request::post("/v1/keys", vec![1, 2, 3])).unwrap();
        let back = read_request(&mut wire.as_slice()).unwrap();
        assert_eq!(back.method, Method::Post);
        assert_eq!(back.path, "/v1/keys");
        assert_eq!(back.body, vec![1, 2, 3]);
    }

    #[test]
    fn response_round_trip_in_small_reads() {
        struct Trickle<'a>(&'a [u8]);
        impl Read for Trickle<'_> {
            fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
                let n = self.0.len().min(3).min(buf.len());
                buf[..n].copy_from_slice(&self.0[..n]);
                self.0 = &self.0[n..];
                Ok(n)
            }
        }
        let mut wire = Vec::new();
        write_response(&mut wire, &Response::new(Status::Gone, b"gone".to_vec())).unwrap();
        let back = read_response(&mut Trickle(&wire)).unwrap();
        assert_eq!(back, Response::new(Status::Gone, b"gone".to_vec()));
    }

    #[test]
    fn rejects_truncated_and_oversized_messages() {
        let mut wire = Vec::new();
        write_request(&mut wire, "h", &Request::post("/v1/keys", vec![0; 10])).unwrap();
        assert!(read_request(&mut &wire[..wire.len() - 1]).is_err());
        let huge = format!("POST / HTTP/1.1\r\nContent-Length: {}\r\n\r\n", MAX_BODY + 1);
        assert!(read_request(&mut huge.as_bytes()).is_err());
        assert!(read_request(&mut &b"BREW /pot HTTP/1.1\r\n\r\n"[..]).is_err());
    }
}
