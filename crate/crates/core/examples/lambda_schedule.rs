//! How strongly the student is pulled toward the teacher for a range of
//! teacher/student validation accuracies.
//!
//!     cargo run --example lambda_schedule -- [l_t] [lambda0]

use fedtraj::fedsim::update_lambda;

fn main() -> fedtraj::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().expect("numeric argument"));
    let l_t = args.next().unwrap_or(0.4);
    let lambda0 = args.next().unwrap_or(5.0);
    let accs = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    print!("stu\\tea");
    for t in accs {
        print!("{t:>8.1}");
    }
    println!();
    for s in accs {
        print!("{s:>7.1}");
        for t in accs {
            print!("{:>8.3}", update_lambda(t, s, l_t, lambda0)?);
        }
        println!();
    }
    Ok(())
}
