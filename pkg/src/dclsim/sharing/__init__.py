from .data import data_round, recv_answer, recv_select_queries, simp_request, simp_respond
from .fed import fed_round, fedavg_aggregate, fedcurv_penalty, fedfish_aggregate, fedprox_penalty
from .mod import (iou_score, leep, leep_score, modmod_round, receiver_select_trustmetric,
                  receiver_select_tryout, sender_rank_and_offer)
