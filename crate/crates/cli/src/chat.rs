//! `labes chat`: interactive belief tracking and response generation.

use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Write};
use std::path::PathBuf;

use anyhow::Result;
use labes::corpus::{fill_from_entity, join, tokenize, BeliefState};
use labes::kb::EntityDb;
use labes::model::{BeliefMode, DecodeMode, Labes, Network, ResponseMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DB;
use crate::fail::{self, Kind};

#[derive(Debug, clap::Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding db.json (falls back to LABES_DATA).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Print the tracked belief and database bucket after each turn.
    #[arg(long)]
    pub show_belief: bool,
    /// Beam width for responses; 0 keeps the checkpoint's setting.
    #[arg(long, default_value_t = 0)]
    pub beam: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub belief: BTreeMap<String, String>,
    pub bucket: usize,
    pub domain: Option<String>,
    pub response: String,
}

pub struct Session<'a> {
    model: &'a Labes,
    db: &'a EntityDb,
    belief: BeliefState,
    prev_response: Vec<String>,
    domain: Option<String>,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Labes, db: &'a EntityDb) -> Session<'a> {
        Session {
            model,
            db,
            belief: BeliefState::empty(&model.schema),
            prev_response: Vec::new(),
            domain: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn reset(&mut self) {
        *self = Session::new(self.model, self.db);
    }

    pub fn respond(&mut self, line: &str) -> labes::Result<Reply> {
        let m = self.model;
        let user = tokenize(line);
        let ctx = m.context(&self.prev_response, &user);
        let b = m
            .decode_belief(Network::Prior, &self.belief, &ctx, None, BeliefMode::Greedy, &mut self.rng)?
            .belief;
        // a repeated domain keeps the last one active unless a slot changes
        let seen: Vec<String> = self.domain.iter().flat_map(|d| [d.clone(), d.clone()]).collect();
        let (d, domain) = m.db_lookup(self.db, &seen, None, &self.belief, &b);
        let mode = match m.config.decode {
            DecodeMode::Greedy => ResponseMode::Greedy,
            DecodeMode::Beam { width } => ResponseMode::Beam { width },
        };
        let out = m.decode_response(&ctx, &b, d, mode)?;
        let delex = m.vocab.decode(&out.tokens);
        let entity = domain
            .as_deref()
            .and_then(|dom| self.db.query(&m.schema, &b, dom).into_iter().next());
        let response = join(&fill_from_entity(&delex, entity));
        let reply = Reply {
            belief: b.to_map(&m.schema),
            bucket: d.bucket(),
            domain: domain.clone(),
            response,
        };
        self.belief = b;
        self.prev_response = delex;
        self.domain = domain;
        Ok(reply)
    }
}

fn belief_line(r: &Reply) -> String {
    let slots: Vec<String> = r.belief.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!(
        "[belief] {} | db {} | domain {}",
        if slots.is_empty() { "(empty)".into() } else { slots.join(" ") },
        r.bucket,
        r.domain.as_deref().unwrap_or("-")
    )
}

pub fn cmd_chat(args: &ChatArgs) -> Result<()> {
    let mut model = crate::eval::load_model(&args.checkpoint)?;
    if args.beam > 0 {
        model.config.decode = DecodeMode::Beam { width: args.beam };
    }
    let dir = crate::eval::data_dir(args.data.as_deref())?;
    let db = EntityDb::load(dir.join(DB), &model.schema).map_err(|e| fail::tag(Kind::Data, e.into()))?;
    let mut session = Session::new(&model, &db);
    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let mut out = std::io::stdout().lock();
    if interactive {
        writeln!(out, "type a message; /reset clears the dialog, /quit exits")?;
    }
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            write!(out, "> ")?;
            out.flush()?;
        }
        let Some(line) = lines.next().transpose()? else {
            break;
        };
        let line = line.trim();
        if !interactive {
            writeln!(out, "user: {line}")?;
        }
        match line {
            "" => continue,
            "/quit" | "/exit" => break,
            "/reset" => {
                session.reset();
                writeln!(out, "[reset]")?;
                continue;
            }
            _ => {}
        }
        let r = session.respond(line)?;
        if args.show_belief {
            writeln!(out, "{}", belief_line(&r))?;
        }
        writeln!(out, "system: {}", r.response)?;
    }
    Ok(())
}
