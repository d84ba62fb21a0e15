"""Compare classifier-based predictions with observed TCP punching.

For every pair of NATs drawn from {cone, symmetric} x {drop, rst, allow},
probe each NAT, predict the pair's outcome, then punch in three SYN
orderings.  Prints one row per pair.
"""
import argparse
import itertools

from holepunch.core import Transport
from holepunch.natcheck import classify, predict_tcp_pair, run_natcheck
from holepunch.scenario import build, natcheck_bed, run_punch, two_nats

ORDERINGS = {"together": {}, "A first": {"B": {"connect_delay": 0.1}},
             "B first": {"A": {"connect_delay": 0.1}}}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    mappings = {"cone": "endpoint_independent", "sym": "address_port_dependent"}
    configs = {f"{m}/{u}": {"mapping": mapping, "tcp_unsolicited": u}
               for m, mapping in mappings.items() for u in ("drop", "rst", "allow")}
    verdicts = {name: classify(run_natcheck(build(natcheck_bed(c, seed=args.seed))))
                for name, c in configs.items()}
    misses = 0
    print(f"{'NAT A':<11}{'NAT B':<11}{'predicted':<14}{'observed (success, retries)'}")
    for a, b in itertools.product(configs, repeat=2):
        runs = [run_punch(build(two_nats(configs[a], configs[b], seed=args.seed, peer_opts=order)),
                          Transport.TCP) for order in ORDERINGS.values()]
        success = all(r.success for r in runs)
        clean = success and all(r.retries == 0 for r in runs)
        p = predict_tcp_pair(verdicts[a], verdicts[b])
        ok = (p.tcp_success, p.tcp_without_retries) == (success, clean)
        misses += not ok
        label = "clean" if p.tcp_without_retries else "retries" if p.tcp_success else "fails"
        observed = ", ".join(f"({int(r.success)}, {r.retries})" for r in runs)
        print(f"{a:<11}{b:<11}{label:<14}{observed}{'' if ok else '  MISMATCH'}")
    print(f"{misses} mismatches")


if __name__ == "__main__":
    main()
