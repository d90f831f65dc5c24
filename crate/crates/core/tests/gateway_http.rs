use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use serde_json::{json, Value};
use socratic_core::gateway::{GatewayError, HttpConfig, HttpGateway};
use socratic_core::prompts::PromptSet;
use socratic_core::world::{new_world, render_scene};
use socratic_core::*;

fn cfg(endpoint: String, retries: u32) -> HttpConfig {
    HttpConfig {
        endpoint,
        model: "stub".into(),
        api_key_env: "SOCRATIC_IT_KEY".into(),
        timeout: Duration::from_secs(5),
        retries,
        backoff_base: Duration::from_millis(1),
        max_in_flight: 1,
    }
}

/// One-shot server: captures the request (headers, body) and answers 200.
fn serve_once(reply: &str) -> (String, std::thread::JoinHandle<(String, String)>) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/chat", l.local_addr().unwrap());
    let reply = json!({"choices": [{"message": {"content": reply}}]}).to_string();
    let h = std::thread::spawn(move || {
        let (mut s, _) = l.accept().unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        let mut headers = String::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            r.read_line(&mut line).unwrap();
            if line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            headers.push_str(&line);
        }
        let mut body = vec![0; len];
        r.read_exact(&mut body).unwrap();
        write!(
            s,
            "HTTP/1.1 200 OK\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
        (headers, String::from_utf8(body).unwrap())
    });
    (url, h)
}

#[test]
fn multimodal_request_carries_scene_and_decode_params() {
    std::env::set_var("SOCRATIC_IT_KEY", "sk-it-secret");
    let (url, h) = serve_once("INVALID - door closed");
    let g = HttpGateway::new(cfg(url, 0)).unwrap();
    let tasks = socratic_core::bench::load_tasks(
        &std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tasks/pan_fridge.json"),
    )
    .unwrap();
    let s = &tasks.scenarios[0];
    let scene = render_scene(&new_world(s).unwrap());
    let prompt = PromptSet::builtin().gen_validity_prompt(&"(Put, pan, fridge)".parse().unwrap());
    let params = DecodeParams::for_vocabulary(&s.vocabulary());
    let c = g.complete_multimodal(&prompt, &scene, &params).unwrap();
    assert_eq!(c.text, "INVALID - door closed");

    let (headers, body) = h.join().unwrap();
    assert!(headers.contains("Bearer sk-it-secret"));
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["temperature"], json!(0.0));
    assert_eq!(v["logit_bias"]["fridge"], json!(0.1));
    assert_eq!(v["logit_bias"]["pan"], json!(0.1));
    let user = v["messages"][1]["content"].as_str().unwrap();
    assert!(user.contains("Observation:\nAgent location: kitchen"));
    assert!(user.contains("- fridge (closed)"));
}

#[test]
fn closed_port_gives_unreachable_after_all_attempts() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let g = HttpGateway::new(cfg(format!("http://127.0.0.1:{port}/chat"), 4)).unwrap();
    let prompt =
        PromptSet::builtin().gen_std_prompt(&Instruction::new("turn on the lamp").unwrap());
    match g.complete(&prompt, &DecodeParams::default()) {
        Err(GatewayError::ProviderUnreachable { attempts, .. }) => assert_eq!(attempts, 5),
        other => panic!("{other:?}"),
    }
}
