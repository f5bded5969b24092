//! The gradient reversal layer: identical forward values, negated
//! gradient into the shared features, unchanged gradient into the probe.
//!
//!     cargo run --release --example gradient_reversal

use tokenmask::autodiff::Tape;
use tokenmask::features::{adversarial_domain_loss, private_domain_loss, DomainProbeHead};
use tokenmask::params::{ParamGrads, ParamStore};
use tokenmask::rng;
use tokenmask::tensor::Tensor;

fn main() -> tokenmask::Result<()> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(0, "example/grl");
    let probe = DomainProbeHead::new("probe", 4, 8, 3, &mut store, &mut r);
    let h = Tensor::row_vector(vec![0.5, -1.0, 0.25, 2.0]);

    let run = |reverse: bool| -> tokenmask::Result<(f64, Vec<f64>, ParamGrads)> {
        let mut tape = Tape::new(&store);
        let x = tape.leaf(h.clone());
        let loss = if reverse {
            adversarial_domain_loss(&mut tape, x, 1, &probe)?
        } else {
            private_domain_loss(&mut tape, x, 1, &probe)?
        };
        let mut grads = ParamGrads::new(&store);
        let g = tape.backward(loss, &mut grads);
        Ok((tape.value(loss).get(0, 0), g.wrt(x).unwrap().data().to_vec(), grads))
    };
    let (adv_loss, adv_grad, adv_params) = run(true)?;
    let (plain_loss, plain_grad, plain_params) = run(false)?;

    println!("loss with reversal {adv_loss:.6}, without {plain_loss:.6}");
    println!("d loss / d h with reversal    {adv_grad:?}");
    println!("d loss / d h without reversal {plain_grad:?}");
    let same = probe
        .param_ids()
        .iter()
        .all(|id| adv_params.get(*id).map(|t| t.data()) == plain_params.get(*id).map(|t| t.data()));
    println!("probe parameter gradients identical: {same}");
    Ok(())
}
