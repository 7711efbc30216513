"""The fifteen standard echocardiographic views."""
from __future__ import annotations

from enum import Enum


class ViewLabel(str, Enum):
    PLAX = "plax"
    RV_INFLOW = "rv_inflow"
    SAX_BASAL = "sax_basal"
    SAX_MID = "sax_mid"
    A4C = "a4c"
    A5C = "a5c"
    A2C = "a2c"
    A3C = "a3c"
    SUB4C = "sub4c"
    SUB_IVC = "sub_ivc"
    SUB_AO = "sub_ao"
    SUP_AO = "sup_ao"
    PW = "pw"
    CW = "cw"
    MMODE = "mmode"

    @property
    def index(self) -> int:
        return ALL_VIEWS.index(self)

    @property
    def is_video(self) -> bool:
        return self in VIDEO_VIEWS


ALL_VIEWS: tuple[ViewLabel, ...] = tuple(ViewLabel)
# PW, CW and m-mode only ever occur as single images
VIDEO_VIEWS: tuple[ViewLabel, ...] = ALL_VIEWS[:12]
STILL_ONLY_VIEWS: tuple[ViewLabel, ...] = ALL_VIEWS[12:]
VIEW_NAMES: tuple[str, ...] = tuple(v.value for v in ALL_VIEWS)
