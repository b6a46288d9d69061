use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use goalpipe::provider::remote_embed;
use goalpipe::Error;

/// Serves `body` to one request and hands back the request body.
fn stub(body: String) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let l = line.trim_end().to_ascii_lowercase();
            if l.is_empty() {
                break;
            }
            if let Some(v) = l.strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut req = vec![0u8; len];
        reader.read_exact(&mut req).unwrap();
        tx.send(String::from_utf8(req).unwrap()).unwrap();
        let mut out = stream;
        write!(
            out,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            body.len(),
            body
        )
        .unwrap();
    });
    (format!("http://{addr}/embed"), rx)
}

fn embedding_body(values: &[f64]) -> String {
    serde_json::json!({ "embedding": values }).to_string()
}

#[test]
fn response_is_normalized() {
    let mut raw = vec![0.0; 64];
    raw[0] = 3.0;
    raw[1] = 4.0;
    let (url, rx) = stub(embedding_body(&raw));
    let q = remote_embed(&url, "a folded arm", 64).unwrap();
    assert_eq!(q.name, "a folded arm");
    assert_eq!(q.dim(), 64);
    assert!((q.values()[0] - 0.6).abs() < 1e-12);
    assert!((q.values()[1] - 0.8).abs() < 1e-12);
    assert!(q.values()[2..].iter().all(|&v| v == 0.0));
    let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
    assert_eq!(sent, serde_json::json!({ "text": "a folded arm" }));
}

#[test]
fn wrong_dimension_is_rejected() {
    let (url, _rx) = stub(embedding_body(&[1.0; 32]));
    assert!(matches!(
        remote_embed(&url, "x", 64),
        Err(Error::DimensionMismatch { expected: 64, got: 32 })
    ));
}

#[test]
fn non_json_body_is_a_bad_response() {
    let (url, _rx) = stub("<html>nope</html>".into());
    assert!(matches!(remote_embed(&url, "x", 64), Err(Error::BadResponse(_))));
}

#[test]
fn zero_embedding_is_rejected() {
    let (url, _rx) = stub(embedding_body(&[0.0; 64]));
    assert!(matches!(remote_embed(&url, "x", 64), Err(Error::ZeroVector)));
}

#[test]
fn closed_port_is_unreachable() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let url = format!("http://127.0.0.1:{port}/embed");
    assert!(matches!(remote_embed(&url, "x", 64), Err(Error::Unreachable(_))));
}
