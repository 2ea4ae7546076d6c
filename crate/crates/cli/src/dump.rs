use clap::Subcommand;
use ndarray::Array2;
use spikerpe_core::attention::{gray_term_matrix, log_pe_bias};
use spikerpe_core::bitcodec::gray_encode;

#[derive(Subcommand)]
pub enum DumpCmd {
    /// `index,gray_bits` rows, bits most-significant first.
    Gray {
        #[arg(long)]
        bits: u32,
        #[arg(long)]
        length: usize,
    },
    /// Log-PE bias matrix, one row per query position.
    Log {
        #[arg(long)]
        length: usize,
    },
    /// Gray-PE positional term `b - d_H(G(i), G(j))`, one row per query position.
    GrayTerm {
        #[arg(long)]
        length: usize,
        #[arg(long)]
        bits: u32,
    },
}

fn matrix_csv(m: &Array2<u32>) -> String {
    m.outer_iter()
        .map(|row| row.iter().map(u32::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

pub fn run(cmd: &DumpCmd) -> anyhow::Result<()> {
    match *cmd {
        DumpCmd::Gray { bits, length } => {
            let mut out = String::from("index,gray_bits\n");
            for i in 0..length {
                let w = gray_encode(i as u64, bits)?;
                out.push_str(&format!("{i},{}\n", w.to_bit_string()));
            }
            print!("{out}");
        }
        DumpCmd::Log { length } => print!("{}", matrix_csv(&log_pe_bias(length)?.view().to_owned())),
        DumpCmd::GrayTerm { length, bits } => print!("{}", matrix_csv(&gray_term_matrix(length, bits)?)),
    }
    Ok(())
}
