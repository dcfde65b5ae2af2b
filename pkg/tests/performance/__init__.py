"""
パフォーマンステストパッケージ

Frame Guidance のパフォーマンステストを提供します。

このパッケージには以下のテストが含まれています：
- スライスデコードとフルデコードの実行時間
- 解析的なデコードコストの比率
- ガイダンス勾配計算のメモリ使用量

使用方法:
    pytest tests/performance/ -m performance
    pytest tests/performance/ -m slow --run-slow  # 時間のかかるテスト
"""
