//! Shared fixtures for integration tests: instance generators and a
//! scripted chat-completion server.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use mitkit::model::{ImageSource, Instance, Message, Segment, Skill};

pub fn image(locator: impl Into<String>) -> ImageSource {
    ImageSource::from_locator(locator).unwrap()
}

/// One image, `turns` question/answer pairs, the slot before the first
/// question.
pub fn single_image(id: &str, turns: usize) -> Instance {
    let mut messages = Vec::with_capacity(turns * 2);
    for t in 0..turns {
        let mut segs = Vec::new();
        if t == 0 {
            segs.push(Segment::Image(1));
        }
        segs.push(Segment::text(format!("What is shown in region {t} of {id}?")));
        messages.push(Message::user(segs).unwrap());
        messages.push(Message::assistant(format!("Answer {t} for {id}.")).unwrap());
    }
    Instance::new(
        id,
        "single",
        Skill::SingleImage,
        vec![image(format!("{id}.jpg"))],
        messages,
    )
    .unwrap()
}

/// `n_images` images, all slots in the first user message, `turns` pairs.
pub fn multi_image(id: &str, n_images: usize, turns: usize, skill: Skill) -> Instance {
    let mut messages = Vec::with_capacity(turns * 2);
    for t in 0..turns {
        let mut segs: Vec<Segment> = Vec::new();
        if t == 0 {
            segs.extend((1..=n_images).map(Segment::Image));
        }
        segs.push(Segment::text(format!("Question {t}?")));
        messages.push(Message::user(segs).unwrap());
        messages.push(Message::assistant("Yes.").unwrap());
    }
    Instance::new(
        id,
        "fixture",
        skill,
        (0..n_images).map(|i| image(format!("{id}/{i}.jpg"))).collect(),
        messages,
    )
    .unwrap()
}

/// Minimal HTTP server answering each request with the next scripted
/// `(status, body)`; the last entry repeats. Counts requests.
pub struct MockServer {
    pub base: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

impl MockServer {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = h.fetch_add(1, Ordering::SeqCst);
                let (status, body) = script[n.min(script.len() - 1)].clone();
                let b = b.clone();
                std::thread::spawn(move || serve(stream, status, &body, &b));
            }
        });
        MockServer { base, hits, bodies }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn request_bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, status: u16, body: &str, seen: &Mutex<Vec<String>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut buf = vec![0u8; content_length];
    let _ = reader.read_exact(&mut buf);
    seen.lock().unwrap().push(String::from_utf8_lossy(&buf).into_owned());
    let reason = if status == 200 { "OK" } else { "Error" };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

/// Chat-completion response body carrying `content`.
pub fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
        .to_string()
}

/// A ten-pair response in the Multi-VQA output format, each question
/// naming two images.
pub fn ten_pair_response() -> String {
    let mut s = String::new();
    for k in 0..10 {
        let a = k % 3 + 1;
        let b = a % 3 + 1;
        s.push_str(&format!(
            "Question: How does the object in image {a} differ from the one in image {b}? (q{k})\n"
        ));
        s.push_str(&format!("Answer: Image {a} shows it larger than image {b} does, case {k}.\n"));
    }
    s
}
