//! The reverse-mode tape on its own: a two-layer softmax classifier and its gradients.

use libra_mil::autodiff::Tape;
use libra_mil::numkernel::Matrix;

fn main() -> libra_mil::Result<()> {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::from_rows(&[[0.5, -1.0, 2.0]])?);
    let w1 = t.leaf(Matrix::from_fn(3, 4, |r, c| 0.1 * (r as f64 - c as f64)));
    let w2 = t.leaf(Matrix::from_fn(4, 2, |r, c| 0.2 * (r + c) as f64 - 0.3));
    let h = t.matmul(x, w1)?;
    let h = t.tanh(h);
    let logits = t.matmul(h, w2)?;
    let probs = t.softmax_rows(logits)?;
    let loss = t.neg_log_pick(probs, 1)?;

    println!("probabilities {:?}", t.value(probs).row(0));
    println!("loss {:.6}", t.value(loss)[(0, 0)]);
    let grads = t.backward(loss)?;
    println!("dL/dW2:");
    for row in grads.get_or_zeros(w2, (4, 2)).iter_rows() {
        println!("  {row:+.5?}");
    }
    println!("dL/dx {:+.5?}", grads.get_or_zeros(x, (1, 3)).row(0));
    Ok(())
}
