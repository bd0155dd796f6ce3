//! Loopback worker for protocol tests. Replies with `config["x"]` (or the
//! first config value) for every request. The first argument picks a
//! misbehaviour: `bad-id`, `no-handshake`, `string-value`, `sleep`,
//! `error` or `crash`.

use std::io::{self, BufRead, Write};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "echo".into());
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if mode != "no-handshake" {
        writeln!(out, "{}", json!({"protocol": "seedtune/1"})).unwrap();
        out.flush().unwrap();
    }
    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        let Ok(req) = serde_json::from_str::<Value>(&line) else {
            eprintln!("unparseable request: {line}");
            std::process::exit(2);
        };
        let id = req["id"].as_u64().unwrap_or(0);
        let config = &req["config"];
        let value = config
            .get("x")
            .or_else(|| config.as_object().and_then(|o| o.values().next()))
            .and_then(Value::as_f64)
            .unwrap_or(0.0);
        let reply = match mode.as_str() {
            "bad-id" => json!({"id": id + 1, "value": value}),
            "string-value" => json!({"id": id, "value": value.to_string()}),
            "error" => json!({"id": id, "error": "diverged"}),
            "crash" => {
                eprintln!("worker crashed on trial {id}");
                std::process::exit(3);
            }
            "sleep" => {
                thread::sleep(Duration::from_secs(30));
                json!({"id": id, "value": value})
            }
            _ => json!({"id": id, "value": value}),
        };
        writeln!(out, "{reply}").unwrap();
        out.flush().unwrap();
    }
}
