mod args;
mod commands;

use std::process::ExitCode;

use clap::{ColorChoice, CommandFactory, FromArgMatches};

use args::{expand_config, Cli, Command};

fn no_color() -> bool {
    std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty())
}

fn main() -> ExitCode {
    let plain = no_color();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .write_style(if plain { env_logger::WriteStyle::Never } else { env_logger::WriteStyle::Auto })
        .init();

    let raw: Vec<_> = std::env::args_os().collect();
    let argv = match expand_config(raw) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let mut cmd = Cli::command().args_override_self(true);
    if plain {
        cmd = cmd.color(ColorChoice::Never);
    }
    let cli = match cmd.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        // clap exits 0 for --help/--version and 2 for usage errors.
        Err(e) => e.exit(),
    };

    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Gradcam(a) => commands::gradcam(a),
        Command::Params(a) => commands::params(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
