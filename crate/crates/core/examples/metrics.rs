//! Evaluation metrics on a toy prediction set: rank correlation, linear
//! correlation, squared error and rounded-score accuracy.

use anyhow::Result;
use ppjudge::data::{acc, average_ranks, mse, pcc, srcc};

fn main() -> Result<()> {
    let label = [7.0, 3.5, 9.0, 5.0, 5.0, 2.0, 8.5];
    let pred = [6.4, 4.1, 8.2, 5.6, 4.4, 2.9, 9.1];
    println!("label ranks {:?}", average_ranks(&label));
    println!("pred  ranks {:?}", average_ranks(&pred));
    println!("SRCC {:.4}", srcc(&pred, &label)?);
    println!("PCC  {:.4}", pcc(&pred, &label)?);
    println!("MSE  {:.4}", mse(&pred, &label)?);
    println!("ACC  {:.4}", acc(&pred, &label)?);

    let flat = [5.0; 7];
    match srcc(&flat, &label) {
        Ok(v) => println!("constant predictions: SRCC {v}"),
        Err(e) => println!("constant predictions: {e}"),
    }
    Ok(())
}
