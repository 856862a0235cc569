//! Out-of-process Lua target. The vendored interpreter is compiled with
//! pc-guard coverage instrumentation; the callbacks below implement the
//! count-and-zero guard contract, with all guards re-armed at the start of
//! every RUN so the engine can decide edge novelty campaign-globally.
//!
//! Speaks the length-prefixed wire protocol on stdin/stdout: RUN executes a
//! chunk statefully under the per-line budget, RESTART rebuilds the
//! interpreter state, TYPEOF reads back runtime types, SCAN reports the
//! module registry and override entry points.

use std::io::Write;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mlua::{Lua, LuaOptions, StdLib, Value, VmState};

use hookfuzz::driver::proto::{read_frame, write_frame, Request, Response};

/// Fired guard ids for the current request, in fire order.
static FIRED: Mutex<Vec<u32>> = Mutex::new(Vec::new());
/// Instrumented guard regions: (start address, slot count, first id).
static REGIONS: Mutex<Vec<(usize, usize, u32)>> = Mutex::new(Vec::new());
static NEXT_GUARD_ID: AtomicU32 = AtomicU32::new(0);

#[no_mangle]
pub unsafe extern "C" fn __sanitizer_cov_trace_pc_guard_init(start: *mut u32, stop: *mut u32) {
    if start == stop || *start != 0 {
        return;
    }
    let len = stop.offset_from(start) as usize;
    let first = NEXT_GUARD_ID.load(Ordering::Relaxed) + 1;
    let mut next = first;
    let mut slot = start;
    while slot < stop {
        *slot = next;
        next += 1;
        slot = slot.add(1);
    }
    NEXT_GUARD_ID.store(next - 1, Ordering::Relaxed);
    REGIONS.lock().unwrap().push((start as usize, len, first));
}

#[no_mangle]
pub unsafe extern "C" fn __sanitizer_cov_trace_pc_guard(guard: *mut u32) {
    if *guard == 0 {
        return;
    }
    let id = *guard;
    *guard = 0;
    FIRED.lock().unwrap().push(id);
}

/// Restore every guard to its assigned id and clear the fire buffer, so the
/// next chunk reports everything it touches.
fn rearm_guards() {
    let regions = REGIONS.lock().unwrap();
    for &(start, len, first) in regions.iter() {
        let slots = unsafe { std::slice::from_raw_parts_mut(start as *mut u32, len) };
        for (offset, slot) in slots.iter_mut().enumerate() {
            *slot = first + offset as u32;
        }
    }
    FIRED.lock().unwrap().clear();
}

fn drain_fired() -> Vec<u32> {
    std::mem::take(&mut *FIRED.lock().unwrap())
}

const MEMORY_LIMIT: usize = 256 << 20;
const TIMEOUT_MARKER: &str = "@@LINE_BUDGET@@";

struct Wrapper {
    lua: Lua,
    modules: Vec<String>,
    line_budget: Duration,
}

fn stdlib_for(name: &str) -> Option<StdLib> {
    match name {
        "coroutine" => Some(StdLib::COROUTINE),
        "table" => Some(StdLib::TABLE),
        "io" => Some(StdLib::IO),
        "os" => Some(StdLib::OS),
        "string" => Some(StdLib::STRING),
        "utf8" => Some(StdLib::UTF8),
        "math" => Some(StdLib::MATH),
        _ => None,
    }
}

fn new_state(modules: &[String]) -> mlua::Result<Lua> {
    // PACKAGE backs `require`; the base library always loads.
    let mut libs = StdLib::PACKAGE;
    for m in modules {
        if let Some(flag) = stdlib_for(m) {
            libs |= flag;
        }
    }
    let lua = Lua::new_with(libs, LuaOptions::default())?;
    lua.set_memory_limit(MEMORY_LIMIT)?;
    Ok(lua)
}

impl Wrapper {
    fn new(modules: Vec<String>, line_budget: Duration) -> mlua::Result<Self> {
        Ok(Wrapper {
            lua: new_state(&modules)?,
            modules,
            line_budget,
        })
    }

    fn run(&mut self, source: &str) -> Response {
        rearm_guards();
        let deadline = Instant::now() + self.line_budget;
        self.lua.set_hook(
            mlua::HookTriggers::new().every_nth_instruction(2_000),
            move |_, _| {
                if Instant::now() > deadline {
                    Err(mlua::Error::RuntimeError(TIMEOUT_MARKER.into()))
                } else {
                    Ok(VmState::Continue)
                }
            },
        );
        let outcome = self.lua.load(source).set_name("line").exec();
        self.lua.remove_hook();
        let edges = drain_fired();
        match outcome {
            Ok(()) => Response::ok(edges, ""),
            Err(err) => {
                let text = flatten_error(&err);
                if text.contains(TIMEOUT_MARKER) {
                    Response::timeout()
                } else {
                    // A faulting chunk may still have covered new ground
                    // before raising; report both.
                    Response::ok(edges, text)
                }
            }
        }
    }

    fn restart(&mut self) -> Response {
        match new_state(&self.modules) {
            Ok(lua) => {
                self.lua = lua;
                Response::ok(vec![], "")
            }
            Err(e) => Response::ok(vec![], format!("restart failed: {e}")),
        }
    }

    fn type_of(&self, names: &[String]) -> Response {
        let globals = self.lua.globals();
        let mut payload = String::new();
        for name in names {
            let token = match globals.get::<Value>(name.as_str()) {
                Ok(value) => type_token(&value),
                Err(_) => String::new(),
            };
            payload.push_str(name);
            payload.push('=');
            payload.push_str(&token);
            payload.push('\n');
        }
        Response::ok(vec![], payload)
    }

    fn scan(&self) -> Response {
        let mut out = String::new();
        let globals = self.lua.globals();
        for module in &self.modules {
            out.push_str(&format!("module {module}\n"));
            let Ok(table) = globals.get::<mlua::Table>(module.as_str()) else {
                continue;
            };
            let mut members: Vec<(String, String)> = Vec::new();
            for pair in table.pairs::<String, Value>() {
                let Ok((name, value)) = pair else { continue };
                if !is_identifier(&name) {
                    continue;
                }
                match value {
                    Value::Function(_) => {
                        members.push((name, "func".into()));
                    }
                    Value::Integer(_) | Value::Number(_) => {
                        members.push((name, "const number".into()));
                    }
                    Value::String(_) => {
                        members.push((name, "const string".into()));
                    }
                    Value::Boolean(_) => {
                        members.push((name, "const boolean".into()));
                    }
                    _ => {}
                }
            }
            members.sort();
            for (name, kind) in members {
                match kind.as_str() {
                    // C functions expose no reliable arity; a small range
                    // keeps generated call shapes plausible.
                    "func" => out.push_str(&format!("func {module} {name} 1 2\n")),
                    other => {
                        let ty = other.strip_prefix("const ").unwrap_or("number");
                        out.push_str(&format!("const {module} {name} {ty}\n"));
                    }
                }
            }
        }
        // Override surface: metamethod slots plus the base library's own
        // functions, declaration-shaped (receiver included).
        for base in ["string", "table"] {
            if !self.modules.iter().any(|m| m == base) {
                continue;
            }
            out.push_str(&format!("base {base}\n"));
            for (name, min, max) in METAMETHODS {
                out.push_str(&format!("override {base} {name} {min} {max}\n"));
            }
            if let Ok(table) = globals.get::<mlua::Table>(base) {
                let mut names: Vec<String> = table
                    .pairs::<String, Value>()
                    .flatten()
                    .filter(|(name, value)| {
                        is_identifier(name) && matches!(value, Value::Function(_))
                    })
                    .map(|(name, _)| name)
                    .collect();
                names.sort();
                for name in names {
                    out.push_str(&format!("override {base} {name} 1 3\n"));
                }
            }
        }
        Response::ok(vec![], out)
    }
}

const METAMETHODS: &[(&str, usize, usize)] = &[
    ("__index", 2, 2),
    ("__newindex", 3, 3),
    ("__add", 2, 2),
    ("__sub", 2, 2),
    ("__mul", 2, 2),
    ("__div", 2, 2),
    ("__mod", 2, 2),
    ("__pow", 2, 2),
    ("__unm", 1, 1),
    ("__concat", 2, 2),
    ("__len", 1, 1),
    ("__eq", 2, 2),
    ("__lt", 2, 2),
    ("__le", 2, 2),
    ("__call", 1, 3),
    ("__tostring", 1, 1),
    ("__gc", 1, 1),
];

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn type_token(value: &Value) -> String {
    match value {
        Value::Nil => String::new(),
        Value::Boolean(_) => "boolean".into(),
        Value::Integer(_) | Value::Number(_) => "number".into(),
        Value::String(_) => "string".into(),
        Value::Function(_) => "function".into(),
        Value::Thread(_) => "thread".into(),
        Value::UserData(_) | Value::LightUserData(_) => "userdata".into(),
        Value::Table(t) => {
            // Generated classes tag themselves (and, via the metatable,
            // their instances) with __name.
            if let Ok(Some(name)) = t.raw_get::<Option<String>>("__name") {
                return name;
            }
            if let Some(mt) = t.metatable() {
                if let Ok(Some(name)) = mt.raw_get::<Option<String>>("__name") {
                    return name;
                }
            }
            "table".into()
        }
        _ => "userdata".into(),
    }
}

/// Single-line error text: syntax failures are tagged so the engine can
/// separate parser rejections from runtime errors.
fn flatten_error(err: &mlua::Error) -> String {
    let text = match err {
        mlua::Error::SyntaxError { message, .. } => format!("[syntax] {message}"),
        mlua::Error::CallbackError { cause, .. } => flatten_error(cause),
        mlua::Error::MemoryError(m) => format!("memory error: {m}"),
        other => other.to_string(),
    };
    text.replace('\n', " ")
}

fn main() {
    let mut line_budget = Duration::from_millis(500);
    let mut modules = vec!["math".to_owned(), "string".to_owned(), "table".to_owned()];
    let args: Vec<String> = std::env::args().collect();
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--line-budget-ms" => {
                if let Some(v) = args.get(i + 1).and_then(|v| v.parse().ok()) {
                    line_budget = Duration::from_millis(v);
                }
                i += 2;
            }
            "--modules" => {
                if let Some(v) = args.get(i + 1) {
                    modules = v.split(',').map(|m| m.trim().to_owned()).collect();
                }
                i += 2;
            }
            other => {
                eprintln!("hookfuzz-lua: unknown argument {other:?}");
                std::process::exit(2);
            }
        }
    }

    let mut wrapper = match Wrapper::new(modules, line_budget) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("hookfuzz-lua: interpreter init failed: {e}");
            std::process::exit(2);
        }
    };

    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut reader = stdin.lock();
    let mut writer = stdout.lock();
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(frame) => frame,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return,
            Err(e) => {
                eprintln!("hookfuzz-lua: read error: {e}");
                std::process::exit(2);
            }
        };
        let response = match Request::decode(&frame) {
            Ok(Request::Run(source)) => wrapper.run(&source),
            Ok(Request::Restart) => wrapper.restart(),
            Ok(Request::TypeOf(names)) => wrapper.type_of(&names),
            Ok(Request::Scan) => wrapper.scan(),
            Err(e) => Response::ok(vec![], format!("protocol error: {e}")),
        };
        if write_frame(&mut writer, &response.encode()).is_err() {
            return;
        }
        let _ = writer.flush();
    }
}
