"""
Frame Guidance

学習不要のフレーム単位ガイダンスをトイビデオ拡散モデル上で実装したツール。
潜在スライシング、ハイブリッドな潜在最適化 (VLO)、ガイダンス損失、
diffusion / flow の 2 つのサンプラーバックエンドと診断解析を含む。
"""

__version__ = "1.0.0"
__author__ = "Frame Guidance Team"
__description__ = "Training-free frame-level guidance for toy video diffusion models"
