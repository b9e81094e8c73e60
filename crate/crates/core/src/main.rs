use std::process::ExitCode;

fn main() -> ExitCode {
    let args = std::env::args().collect();
    let code = pix2pix::cli::main_with(args, &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code.clamp(0, 255) as u8)
}
