use std::process::Command;

fn main() {
    let hash = Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    if let Some(h) = hash {
        println!("cargo:rustc-env=CFTP_GIT_HASH=git {h}");
    }
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
