"""Parameter counts and checkpoint sizes across channel scales."""
import tempfile
from pathlib import Path

from promnet.checkpoint import parameter_payload_bytes, save_checkpoint
from promnet.model import FcLstm, FcLstmConfig, PromNet, PromNetConfig, param_count
from promnet.optim import RmsPropState

rows = [("promnet", f"scale={s}", PromNetConfig(scale=s), PromNet) for s in ("1/8", "1/4", "1/2", "1")]
rows += [("fclstm", f"hidden={h}", FcLstmConfig(hidden=h), FcLstm) for h in (256, 1024)]

with tempfile.TemporaryDirectory() as tmp:
    print(f"{'model':<8} {'config':<12} {'params':>11} {'payload B':>11} {'file B':>11}")
    for kind, label, cfg, cls in rows:
        net = cls(cfg)
        size = save_checkpoint(net, RmsPropState.for_model(net), Path(tmp) / "m.prck")
        print(f"{kind:<8} {label:<12} {param_count(cfg):>11,} {parameter_payload_bytes(net):>11,} {size:>11,}")
