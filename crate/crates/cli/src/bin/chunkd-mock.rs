//! A tiny line-oriented interpreter used as a stand-in engine in tests.
//!
//! Commands, one per line:
//!
//! ```text
//! set NAME VALUE     bind a variable
//! get NAME           print its value (error on stderr if unset)
//! print(EXPR)        integer arithmetic with + - *
//! echo TEXT          print TEXT
//! warn TEXT          print TEXT on stderr
//! sleep SECS         pause
//! source PATH        run a file in the current state
//! exit [CODE]        terminate
//! ```
//!
//! With a FILE argument the file is run in a fresh state and the process
//! exits (batch mode); otherwise commands are read from stdin (REPL mode).

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process;
use std::thread;
use std::time::Duration;

use clap::Parser;

#[derive(Parser)]
#[command(
    name = "chunkd-mock",
    version,
    about = "Scriptable stand-in engine for chunkd tests"
)]
struct Args {
    /// Append every line received on stdin to this file.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Printed once at startup.
    #[arg(long)]
    banner: Option<String>,
    /// Printed on its own line after every command in REPL mode.
    #[arg(long)]
    prompt: Option<String>,
    /// Run this file and exit.
    file: Option<PathBuf>,
}

struct Interp {
    vars: HashMap<String, String>,
}

enum Flow {
    Continue,
    Exit(i32),
}

fn eval(expr: &str) -> Result<i64, String> {
    let mut total = 0i64;
    let mut sign = 1i64;
    let mut term = String::new();
    let flush = |term: &mut String, total: &mut i64, sign: i64| -> Result<(), String> {
        let mut product = 1i64;
        for factor in term.split('*') {
            let f = factor.trim();
            product = product
                .checked_mul(f.parse::<i64>().map_err(|_| format!("bad number `{f}`"))?)
                .ok_or("overflow")?;
        }
        *total = total.checked_add(sign * product).ok_or("overflow")?;
        term.clear();
        Ok(())
    };
    for c in expr.chars() {
        match c {
            '+' | '-' if !term.trim().is_empty() => {
                flush(&mut term, &mut total, sign)?;
                sign = if c == '+' { 1 } else { -1 };
            }
            _ => term.push(c),
        }
    }
    flush(&mut term, &mut total, sign)?;
    Ok(total)
}

impl Interp {
    fn run_line(&mut self, line: &str, out: &mut impl Write) -> io::Result<Flow> {
        let line = line.trim_end_matches('\r');
        let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
        match cmd {
            "" => {}
            "set" => {
                let (name, value) = rest.split_once(' ').unwrap_or((rest, ""));
                self.vars.insert(name.to_string(), value.to_string());
            }
            "get" => match self.vars.get(rest) {
                Some(v) => writeln!(out, "{v}")?,
                None => self.error(out, &format!("`{rest}` is not set"))?,
            },
            "echo" => writeln!(out, "{rest}")?,
            "warn" => {
                out.flush()?;
                eprintln!("{rest}");
            }
            "sleep" => match rest.trim().parse::<f64>() {
                Ok(s) if s >= 0.0 => thread::sleep(Duration::from_secs_f64(s)),
                _ => self.error(out, &format!("bad duration `{rest}`"))?,
            },
            "source" => match fs::read_to_string(rest) {
                Ok(text) => {
                    for l in text.lines() {
                        if let Flow::Exit(code) = self.run_line(l, out)? {
                            return Ok(Flow::Exit(code));
                        }
                    }
                }
                Err(e) => self.error(out, &format!("{rest}: {e}"))?,
            },
            "exit" => return Ok(Flow::Exit(rest.trim().parse().unwrap_or(0))),
            _ => match line
                .strip_prefix("print(")
                .and_then(|r| r.strip_suffix(')'))
            {
                Some(expr) => match eval(expr) {
                    Ok(v) => writeln!(out, "{v}")?,
                    Err(e) => self.error(out, &e)?,
                },
                None => self.error(out, &format!("unknown command `{cmd}`"))?,
            },
        }
        Ok(Flow::Continue)
    }

    fn error(&self, out: &mut impl Write, message: &str) -> io::Result<()> {
        out.flush()?;
        eprintln!("error: {message}");
        Ok(())
    }
}

fn main() {
    let args = Args::parse();
    let mut interp = Interp {
        vars: HashMap::new(),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();

    if let Some(banner) = &args.banner {
        let _ = writeln!(out, "{banner}");
        let _ = out.flush();
    }

    if let Some(path) = &args.file {
        let code = match fs::read_to_string(path) {
            Ok(text) => {
                let mut code = 0;
                for line in text.lines() {
                    match interp.run_line(line, &mut out) {
                        Ok(Flow::Continue) => {}
                        Ok(Flow::Exit(c)) => {
                            code = c;
                            break;
                        }
                        Err(_) => process::exit(1),
                    }
                }
                code
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                2
            }
        };
        let _ = out.flush();
        process::exit(code);
    }

    let mut recorder: Option<File> = args.record.as_ref().map(|p| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .unwrap_or_else(|e| {
                eprintln!("error: {}: {e}", p.display());
                process::exit(2)
            })
    });
    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if let Some(r) = recorder.as_mut() {
            let _ = writeln!(r, "{line}");
        }
        match interp.run_line(&line, &mut out) {
            Ok(Flow::Continue) => {}
            Ok(Flow::Exit(code)) => {
                let _ = out.flush();
                process::exit(code);
            }
            Err(_) => break,
        }
        if let Some(prompt) = &args.prompt {
            let _ = writeln!(out, "{prompt}");
        }
        if out.flush().is_err() {
            break;
        }
    }
}
