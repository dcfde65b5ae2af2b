"""
統合テストパッケージ

Frame Guidance の統合テストを提供します。

- test_end_to_end: dataset → train → generate → analyze の CLI パイプライン
"""
