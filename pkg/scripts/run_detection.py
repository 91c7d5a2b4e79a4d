"""Train the window proposal detector on synthetic untrimmed sequences and report mAP."""

import argparse

from skelconv.experiments import DetectionExperiment, run_detection
from skelconv.synthetic import background_sequence
from skelconv.detector import forward_detect


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/detection")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log-every", type=int, default=100)
    args = ap.parse_args()
    exp = DetectionExperiment(epochs=args.epochs, learning_rate=args.lr, decay_epoch=int(args.epochs * 0.75),
                              model_seed=args.seed)

    def log(rec):
        if rec["iteration"] % args.log_every == 0:
            print(f"iter {rec['iteration']:5d}  loss {rec['loss']:.3f}  wpn {rec['wpn_cls']:.3f}/{rec['wpn_reg']:.3f}"
                  f"  rcnn {rec['rcnn_cls']:.3f}/{rec['rcnn_reg']:.3f}", flush=True)

    r = run_detection(exp, args.out_dir, on_iteration=log)
    print(f"trained {r['iterations']} iterations in {r['train_seconds']:.0f}s")
    # a sequence with no actions should produce (almost) nothing
    bg = forward_detect(background_sequence(exp.synth_config(), 400, 123), r["model"])
    print(f"detections on an action-free sequence: {len(bg)}")
    print(f"results written under {args.out_dir}/eval")


if __name__ == "__main__":
    main()
