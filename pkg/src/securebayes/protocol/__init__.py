"""Three-party protocol: sites, cloud server and CSP over an in-process fabric."""
from .channel import ChannelError, Fabric, LinearDelay
from .masking import MaskPair, draw_mask, fisher_yates, mask_moduli
from .messages import CSP, SERVER, Message, PartyId, site
from .parties import NORM_QUANTUM, Csp, ProtocolAbort, Server, Site, quantize_norm
from .runner import ConfigError, ProtocolConfig, ProtocolResult, export_parity, run_protocol, secure_max

__all__ = [
    "CSP", "ChannelError", "NORM_QUANTUM", "ConfigError", "Csp", "Fabric", "LinearDelay", "MaskPair", "Message", "PartyId",
    "ProtocolAbort", "ProtocolConfig", "ProtocolResult", "SERVER", "Server", "Site", "draw_mask",
    "export_parity", "fisher_yates", "mask_moduli", "quantize_norm", "run_protocol", "secure_max", "site",
]
