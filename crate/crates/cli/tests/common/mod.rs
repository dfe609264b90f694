//! Shared helpers for the CLI integration tests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use infofuse_core::synthetic::{block_of_image_base64, block_phrase};

/// Minimal chat-completions server. Replies with a two-paragraph answer whose
/// final paragraph names the block encoded in the attached image.
pub struct StubEndpoint {
    pub url: String,
    pub calls: Arc<AtomicUsize>,
}

impl StubEndpoint {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub endpoint");
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&calls);
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let counter = Arc::clone(&counter);
                std::thread::spawn(move || {
                    let _ = serve(stream, &counter);
                });
            }
        });
        Self { url, calls }
    }
}

fn read_body(reader: &mut BufReader<TcpStream>) -> std::io::Result<Option<Vec<u8>>> {
    let mut content_length = None;
    let mut chunked = false;
    let mut first = true;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        let line = line.trim_end();
        if first {
            first = false;
            continue;
        }
        if line.is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            content_length = v.trim().parse().ok();
        }
        if lower.starts_with("transfer-encoding:") && lower.contains("chunked") {
            chunked = true;
        }
    }
    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size)?;
            let size = usize::from_str_radix(size.trim(), 16).unwrap_or(0);
            let mut chunk = vec![0; size + 2];
            reader.read_exact(&mut chunk)?;
            if size == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..size]);
        }
    } else {
        body.resize(content_length.unwrap_or(0), 0);
        reader.read_exact(&mut body)?;
    }
    Ok(Some(body))
}

fn serve(stream: TcpStream, calls: &AtomicUsize) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    while let Some(body) = read_body(&mut reader)? {
        calls.fetch_add(1, Ordering::SeqCst);
        let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
        let url = request["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap_or("");
        let block = url.split_once("base64,").and_then(|(_, data)| block_of_image_base64(data));
        let content = match block {
            Some(b) => format!(
                "Step 1: The product is in the center.\n\nA {} with a smooth finish, shown against a plain background.",
                block_phrase(b)
            ),
            None => "An unidentified product.".to_string(),
        };
        let reply = serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string();
        write!(
            writer,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{reply}",
            reply.len()
        )?;
        writer.flush()?;
    }
    Ok(())
}
